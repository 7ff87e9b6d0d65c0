#pragma once

#include <array>
#include <memory>
#include <string>
#include <utility>

#include <json.hpp>

#include "freeseg/training.hpp"

namespace freeseg::ckpt {

// Trainer-side state carried through a checkpoint so interrupted training
// resumes bit-for-bit: iteration count, optimizer step, and the sampler RNG.
struct TrainerState {
    int64_t iteration = 0;
    int64_t adam_t = 0;
    std::array<uint64_t, 4> rng_state{};
};

// Single-file container: magic, JSON meta header, then named f64 tensor
// records in the dataset binary format. Frozen encoders are stored under
// sections tagged "frozen".
void save_checkpoint(const std::string& path, const train::Model& model, const TrainerState& ts);

std::pair<std::unique_ptr<train::Model>, TrainerState> load_checkpoint(const std::string& path);

nlohmann::json read_checkpoint_meta(const std::string& path);

uint64_t file_hash(const std::string& path);

} // namespace freeseg::ckpt
