#pragma once

#include <string>
#include <vector>

#include "freeseg/autodiff.hpp"
#include "freeseg/tensor.hpp"

namespace freeseg::proposer {

struct ProposerConfig {
    int n_queries = 16;
    int embed_dim = 64; // D, matches the concept space
    std::vector<int> backbone_channels = {32, 64, 64};
    int decoder_layers = 2;
    int n_heads = 4;
    int ffn_hidden = 128;
    bool use_interaction = true;
    uint64_t seed = 4242;

    void validate() const;
};

struct ProposalForward {
    ad::Node* queries = nullptr;          // F_v: (N, D)
    ad::Node* mask_logits = nullptr;      // (N, H', W') at feature resolution
    ad::Node* mask_logits_full = nullptr; // bilinearly upsampled to (N, H, W)
    std::vector<ad::Node*> scale_tokens;  // decoder-layer memories F_v^z (tokens x D)
};

// Cross-attention from spatial feature tokens (queries) to text embeddings
// (keys/values), with a zero-initialized output projection and a residual
// connection: at init the module is the identity map.
struct SciLayerParams {
    Parameter* wq = nullptr;
    Parameter* wk = nullptr;
    Parameter* wv = nullptr;
    Parameter* wh = nullptr; // output projection, zero-init
};

ad::Node* semantic_context_interaction(ad::Graph& g, ad::Node* tokens, ad::Node* text_emb,
                                       ad::Node* wq, ad::Node* wk, ad::Node* wv, ad::Node* wh);

// Strided conv backbone + FPN-style pixel decoder + a small transformer
// decoder over learned queries. Produces per-query visual concepts and
// class-agnostic mask logits; with interaction enabled the text embeddings
// are injected into each decoder-layer memory beforehand.
class Proposer {
public:
    Proposer(ParamStore& store, const ProposerConfig& cfg);

    const ProposerConfig& config() const { return cfg_; }

    // text_emb may be null; it must be null when interaction is disabled and
    // is then ignored entirely (masks are bitwise vocabulary-independent).
    ProposalForward forward(ad::Graph& g, const ImageF32& image, ad::Node* text_emb) const;

private:
    ad::Node* attention(ad::Graph& g, ad::Node* q_in, ad::Node* k_in, ad::Node* v_in,
                        Parameter* wq, Parameter* wk, Parameter* wv, Parameter* wo) const;

    ProposerConfig cfg_;
    // backbone
    Parameter *conv1_w_, *conv1_b_, *conv2_w_, *conv2_b_, *conv3_w_, *conv3_b_;
    Parameter *proj2_w_, *proj2_b_, *proj3_w_, *proj3_b_;
    Parameter *maskfeat_w_, *maskfeat_b_;
    // decoder
    struct DecoderLayer {
        SciLayerParams sci;
        Parameter *ca_wq, *ca_wk, *ca_wv, *ca_wo;
        Parameter *sa_wq, *sa_wk, *sa_wv, *sa_wo;
        Parameter *ln1_g, *ln1_b, *ln2_g, *ln2_b, *ln3_g, *ln3_b;
        Parameter *ffn_w1, *ffn_b1, *ffn_w2, *ffn_b2;
    };
    std::vector<DecoderLayer> layers_;
    Parameter* query_feat_;
    Parameter *final_ln_g_, *final_ln_b_;
    Parameter *class_w_, *class_b_;
    Parameter *maskmlp_w1_, *maskmlp_b1_, *maskmlp_w2_, *maskmlp_b2_;
};

// Fixed 2D sinusoidal positional encoding, (h*w, dim) token layout.
Tensor sinusoidal_positions(int h, int w, int dim);

} // namespace freeseg::proposer
