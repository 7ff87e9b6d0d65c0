#pragma once

#include <map>
#include <string>
#include <vector>

#include "freeseg/autodiff.hpp"
#include "freeseg/synthdata.hpp"
#include "freeseg/tensor.hpp"

namespace freeseg::concepts {

// A prompt token stream: fixed vocabulary words interleaved with free
// context vectors (the learnable prompt slots).
struct TokenSequence {
    struct Entry {
        std::string word; // empty => context entry
        Tensor ctx;

        bool is_word() const { return !word.empty(); }
    };
    std::vector<Entry> entries;

    static TokenSequence from_words(const std::vector<std::string>& words);
};

// Graph-side token: a word or a live autodiff node (context vector).
struct GraphToken {
    std::string word;
    ad::Node* ctx = nullptr;
};

struct ConceptEncoderConfig {
    int token_dim = 64;
    int out_dim = 64;
    uint64_t seed = 9021;
    double word_hash_scale = 0.15; // magnitude of the word-identity component
    double pos_scale = 0.10;       // magnitude of the positional component
    int max_seq_len = 24;
};

// Frozen text encoder: a token table grounded in class attributes, two fixed
// orthogonal mixing layers with a tanh after the first, mean pooling and L2
// normalization. Differentiable only through context-vector entries.
class ConceptEncoder {
public:
    ConceptEncoder(const synth::CategorySet& cats, const ConceptEncoderConfig& cfg);

    int dim() const { return cfg_.out_dim; }
    int token_dim() const { return cfg_.token_dim; }
    const ConceptEncoderConfig& config() const { return cfg_; }
    bool has_word(const std::string& w) const { return word_index_.count(w) != 0; }

    Tensor encode(const TokenSequence& seq) const;
    ad::Node* encode(ad::Graph& g, const std::vector<GraphToken>& seq) const;

    // The shared grounding pathway: embeds a raw attribute-space vector as if
    // it were one pooled name token. Used by the frozen region encoder.
    Tensor encode_attr_vector(const std::vector<double>& attr) const;

    uint64_t params_hash() const;

    // serialization surface
    const std::vector<std::string>& words() const { return words_; }
    const Tensor& word_matrix() const { return word_matrix_; }
    const Tensor& lift() const { return lift_; }
    const Tensor& mix1() const { return mix1_; }
    const Tensor& mix2() const { return mix2_; }
    const Tensor& positions() const { return pos_; }
    int attr_len() const { return attr_len_; }

    // Rebuild from checkpointed tensors.
    ConceptEncoder(const ConceptEncoderConfig& cfg, int attr_len, std::vector<std::string> words,
                   Tensor word_matrix, Tensor lift, Tensor mix1, Tensor mix2, Tensor pos);

private:
    Tensor word_vector(const std::string& w) const;

    ConceptEncoderConfig cfg_;
    int attr_len_ = 0;
    std::vector<std::string> words_;
    std::map<std::string, int> word_index_;
    Tensor word_matrix_; // n_words x token_dim
    Tensor lift_;        // token_dim x attr_len
    Tensor mix1_;        // token_dim x token_dim, orthogonal
    Tensor mix2_;        // out_dim x token_dim, orthogonal
    Tensor pos_;         // max_seq_len x token_dim
};

struct RegionStats {
    std::array<double, 3> mean_color{};
    double norm_area = 0.0;
    double compactness = 0.0;
    double eccentricity = 0.0;
    std::array<double, 8> orient_hist{}; // boundary-normal orientation, sums to 1
    double texture_raw = 0.0;            // masked local-contrast measure
};

// Frozen region encoder: hand-computed region statistics mapped into the
// concept space through the same attribute grounding as the text side.
// Family and texture estimates are calibrated against canonical renders at
// construction time and never change afterwards.
class RegionEncoder {
public:
    RegionEncoder(const ConceptEncoder& enc, const synth::CategorySet& cats);

    Tensor encode_region(const ImageF32& image, const MaskU8& mask) const;
    RegionStats compute_stats(const ImageF32& image, const MaskU8& mask) const;

    uint64_t params_hash() const;

    // serialization surface
    const Tensor& family_anchors() const { return family_anchors_; }
    const Tensor& texture_anchors() const { return texture_anchors_; } // k x 2 (raw, attr)
    RegionEncoder(const ConceptEncoder& enc, int n_families, Tensor family_anchors,
                  Tensor texture_anchors);

private:
    std::vector<double> estimate_attributes(const RegionStats& st) const;
    static std::vector<double> family_descriptor(const RegionStats& st);

    const ConceptEncoder* enc_;
    int n_families_ = 0;
    Tensor family_anchors_;  // n_families x 10 canonical descriptors
    Tensor texture_anchors_; // k x 2, sorted by raw value
    double kappa_ = 0.02;    // softness of the family assignment
};

// Fixed random orthogonal matrix (rows x cols, rows <= cols or square) via
// Gram-Schmidt on a seeded Gaussian.
Tensor random_orthogonal(int rows, int cols, Rng& rng);

} // namespace freeseg::concepts
