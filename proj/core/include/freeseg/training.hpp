#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "freeseg/autodiff.hpp"
#include "freeseg/conceptspace.hpp"
#include "freeseg/config.hpp"
#include "freeseg/prompts.hpp"
#include "freeseg/proposer.hpp"
#include "freeseg/synthdata.hpp"

namespace freeseg::train {

using prompts::Task;

struct TrainConfig {
    // optimization
    double learning_rate = 2e-4;
    double weight_decay = 2e-4;
    int iterations = 2000;
    int batch_size = 1;
    double clip_norm = 1.0; // <= 0 disables
    // losses
    double lambda_focal = 5.0;
    double lambda_dice = 5.0;
    double lambda_cla = 2.0; // matching-cost weight of the class term
    double focal_gamma = 2.0;
    double focal_alpha = 0.25;
    double temperature = 0.07;
    double noobj_weight = 0.1;
    // sampling
    uint64_t seed = 1;
    std::vector<Task> task_mix = {Task::Semantic, Task::Instance, Task::Panoptic};
    // model shape
    int n_queries = 16;
    int embed_dim = 64;
    int decoder_layers = 2;
    int n_heads = 4;
    int ffn_hidden = 128;
    int n_task_ctx = 4;
    int n_class_ctx = 8;
    bool class_adaptive = true;
    bool task_adaptive = true;
    bool use_interaction = true;
    uint64_t model_seed = 4242;
    uint64_t encoder_seed = 9021;
    uint64_t prompt_seed = 77;

    static TrainConfig from_kv(const KVConfig& kv);
    KVConfig to_kv() const;
    void validate() const;
};

// Query-to-ground-truth assignment.
struct MatchResult {
    std::vector<std::pair<int, int>> pairs; // (query index, gt index)
    std::vector<int> unmatched_queries;
};

// One ground-truth target for the sampled task: a binary mask plus the class
// index LOCAL to the class list the text embeddings were built from.
struct GtTarget {
    Tensor mask; // (H, W) in {0,1}
    int class_index = 0;
};

Task sample_task(Rng& rng, const std::vector<Task>& task_mix);

// S(i,j) = <a_i, b_j> / (|a_i||b_j|); throws NumericFault on zero-norm rows.
Tensor cosine_similarity_map(const Tensor& a, const Tensor& b);

// Matching cost: lambda_cla * (-S[q, class]) + lambda_focal * focal +
// lambda_dice * dice, evaluated without gradients.
Tensor build_match_cost(const Tensor& similarity, const Tensor& mask_logits,
                        const std::vector<GtTarget>& gt, const TrainConfig& cfg);

// Exactly optimal rectangular assignment (rows = GT, cols = queries).
MatchResult hungarian_match_cost(const Tensor& cost);

MatchResult hungarian_match(const Tensor& similarity, const Tensor& mask_logits,
                            const std::vector<GtTarget>& gt, const TrainConfig& cfg);

// Cross-entropy over softmax(S/temperature) rows: matched queries target
// their class column (taken from gt), unmatched the trailing no-object
// column, weighted by noobj_weight; mean over queries.
double classification_loss_value(const Tensor& similarity_with_noobj, const MatchResult& match,
                                 const std::vector<GtTarget>& gt, double temperature,
                                 double noobj_weight);
ad::Node* classification_loss(ad::Graph& g, ad::Node* similarity_with_noobj,
                              const MatchResult& match, const std::vector<GtTarget>& gt,
                              double temperature, double noobj_weight);

// Task-specific targets derived from a scene (local class indices resolved
// against `class_ids`, the global ids the text embeddings were built over).
std::vector<GtTarget> task_targets(const synth::Scene& scene, Task task,
                                   const synth::CategorySet& cats,
                                   const std::vector<int>& class_ids);

// The unified checkpointable bundle: frozen encoders, prompt bank, proposer,
// and every parameter in one store.
struct Model {
    synth::CategorySet cats;
    TrainConfig cfg;
    std::unique_ptr<concepts::ConceptEncoder> encoder;
    std::unique_ptr<concepts::RegionEncoder> region_encoder;
    ParamStore store;
    std::unique_ptr<prompts::PromptBank> bank;
    std::unique_ptr<proposer::Proposer> net;

    static std::unique_ptr<Model> build(const synth::CategorySet& cats, const TrainConfig& cfg);

    std::vector<std::string> seen_class_names() const;
    std::vector<int> seen_class_ids() const;
    uint64_t parameter_hash() const; // all parameters, frozen included
};

struct IterationStats {
    int64_t iteration = 0;
    Task task = Task::Semantic;
    double loss = 0, loss_cla = 0, loss_focal = 0, loss_dice = 0;
};

class Trainer {
public:
    Trainer(Model& model, const std::vector<synth::Scene>& dataset);

    // Runs `n` iterations; per-iteration stats via the optional callback.
    void run(int64_t n, const std::function<void(const IterationStats&)>& on_iter = nullptr);
    IterationStats step();

    int64_t iteration() const { return iteration_; }
    const Rng& rng() const { return rng_; }
    AdamW& optimizer() { return opt_; }

    // resume support
    void restore(int64_t iteration, const std::array<uint64_t, 4>& rng_state, int64_t adam_t);

private:
    Model& model_;
    const std::vector<synth::Scene>& data_;
    AdamW opt_;
    Rng rng_;
    int64_t iteration_ = 0;
};

} // namespace freeseg::train
