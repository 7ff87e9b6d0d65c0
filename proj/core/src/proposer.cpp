#include "freeseg/proposer.hpp"

#include <cmath>

#include "freeseg/errors.hpp"

namespace freeseg::proposer {

void ProposerConfig::validate() const {
    if (n_queries < 1) throw ConfigError("proposer: n_queries must be positive");
    if (embed_dim < 8 || embed_dim % 4 != 0)
        throw ConfigError("proposer: embed_dim must be a multiple of 4 and >= 8");
    if (backbone_channels.size() != 3) throw ConfigError("proposer: expected 3 backbone stages");
    if (decoder_layers < 1) throw ConfigError("proposer: decoder_layers must be >= 1");
    if (n_heads < 1 || embed_dim % n_heads != 0)
        throw ConfigError("proposer: n_heads must divide embed_dim");
}

Tensor sinusoidal_positions(int h, int w, int dim) {
    if (dim % 4 != 0) throw ConfigError("sinusoidal_positions: dim must be a multiple of 4");
    const int quarter = dim / 4;
    Tensor pe({h * w, dim});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int t = y * w + x;
            for (int k = 0; k < quarter; ++k) {
                const double omega = 1.0 / std::pow(64.0, static_cast<double>(k) / quarter);
                pe(t, 2 * k) = std::sin(y * omega);
                pe(t, 2 * k + 1) = std::cos(y * omega);
                pe(t, 2 * quarter + 2 * k) = std::sin(x * omega);
                pe(t, 2 * quarter + 2 * k + 1) = std::cos(x * omega);
            }
        }
    return pe;
}

ad::Node* semantic_context_interaction(ad::Graph& g, ad::Node* tokens, ad::Node* text_emb,
                                       ad::Node* wq, ad::Node* wk, ad::Node* wv, ad::Node* wh) {
    if (text_emb->val.rank() != 2 || text_emb->val.dim(0) < 1)
        throw ConfigError("semantic_context_interaction: empty class set");
    const int d = tokens->val.dim(1);
    if (text_emb->val.dim(1) != d)
        throw ConfigError("semantic_context_interaction: feature/text dim mismatch");
    ad::Node* q = g.matmul(tokens, wq, false, true);   // (T, D)
    ad::Node* k = g.matmul(text_emb, wk, false, true); // (C, D)
    ad::Node* v = g.matmul(text_emb, wv, false, true); // (C, D)
    ad::Node* scores = g.scale(g.matmul(q, k, false, true), 1.0 / std::sqrt(static_cast<double>(d)));
    ad::Node* attn = g.softmax_rows(scores);       // rows sum to 1 over classes
    ad::Node* ctx = g.matmul(attn, v);             // (T, D)
    ad::Node* out = g.matmul(ctx, wh, false, true); // zero-init H => identity at init
    return g.add(tokens, out);
}

namespace {

Tensor conv_init(int co, int ci, int k, Rng& rng) {
    const double std = std::sqrt(2.0 / (ci * k * k));
    return Tensor::randn({co, ci, k, k}, rng, std);
}

Tensor linear_init(int out, int in, Rng& rng) {
    const double std = std::sqrt(2.0 / (in + out));
    return Tensor::randn({out, in}, rng, std);
}

} // namespace

Proposer::Proposer(ParamStore& store, const ProposerConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(cfg_.seed);
    const int d = cfg_.embed_dim;
    const int c1 = cfg_.backbone_channels[0];
    const int c2 = cfg_.backbone_channels[1];
    const int c3 = cfg_.backbone_channels[2];

    auto P = [&](const std::string& name, Tensor t) { return &store.create("proposer." + name, std::move(t)); };

    conv1_w_ = P("conv1.w", conv_init(c1, 3, 3, rng));
    conv1_b_ = P("conv1.b", Tensor({c1}));
    conv2_w_ = P("conv2.w", conv_init(c2, c1, 3, rng));
    conv2_b_ = P("conv2.b", Tensor({c2}));
    conv3_w_ = P("conv3.w", conv_init(c3, c2, 3, rng));
    conv3_b_ = P("conv3.b", Tensor({c3}));
    proj2_w_ = P("proj2.w", conv_init(d, c2, 1, rng));
    proj2_b_ = P("proj2.b", Tensor({d}));
    proj3_w_ = P("proj3.w", conv_init(d, c3, 1, rng));
    proj3_b_ = P("proj3.b", Tensor({d}));
    maskfeat_w_ = P("maskfeat.w", conv_init(d, d, 3, rng));
    maskfeat_b_ = P("maskfeat.b", Tensor({d}));

    layers_.resize(static_cast<size_t>(cfg_.decoder_layers));
    for (int z = 0; z < cfg_.decoder_layers; ++z) {
        auto& L = layers_[static_cast<size_t>(z)];
        const std::string p = "dec" + std::to_string(z) + ".";
        L.sci.wq = P(p + "sci.wq", linear_init(d, d, rng));
        L.sci.wk = P(p + "sci.wk", linear_init(d, d, rng));
        L.sci.wv = P(p + "sci.wv", linear_init(d, d, rng));
        L.sci.wh = P(p + "sci.wh", Tensor({d, d})); // zero-init output projection
        L.ca_wq = P(p + "cross.wq", linear_init(d, d, rng));
        L.ca_wk = P(p + "cross.wk", linear_init(d, d, rng));
        L.ca_wv = P(p + "cross.wv", linear_init(d, d, rng));
        L.ca_wo = P(p + "cross.wo", linear_init(d, d, rng));
        L.sa_wq = P(p + "self.wq", linear_init(d, d, rng));
        L.sa_wk = P(p + "self.wk", linear_init(d, d, rng));
        L.sa_wv = P(p + "self.wv", linear_init(d, d, rng));
        L.sa_wo = P(p + "self.wo", linear_init(d, d, rng));
        L.ln1_g = P(p + "ln1.g", Tensor::full({d}, 1.0));
        L.ln1_b = P(p + "ln1.b", Tensor({d}));
        L.ln2_g = P(p + "ln2.g", Tensor::full({d}, 1.0));
        L.ln2_b = P(p + "ln2.b", Tensor({d}));
        L.ln3_g = P(p + "ln3.g", Tensor::full({d}, 1.0));
        L.ln3_b = P(p + "ln3.b", Tensor({d}));
        L.ffn_w1 = P(p + "ffn.w1", linear_init(cfg_.ffn_hidden, d, rng));
        L.ffn_b1 = P(p + "ffn.b1", Tensor({cfg_.ffn_hidden}));
        L.ffn_w2 = P(p + "ffn.w2", linear_init(d, cfg_.ffn_hidden, rng));
        L.ffn_b2 = P(p + "ffn.b2", Tensor({d}));
    }

    query_feat_ = P("query_feat", Tensor::randn({cfg_.n_queries, d}, rng, 0.1));
    final_ln_g_ = P("final_ln.g", Tensor::full({d}, 1.0));
    final_ln_b_ = P("final_ln.b", Tensor({d}));
    class_w_ = P("class_head.w", linear_init(d, d, rng));
    class_b_ = P("class_head.b", Tensor({d}));
    maskmlp_w1_ = P("mask_mlp.w1", linear_init(d, d, rng));
    maskmlp_b1_ = P("mask_mlp.b1", Tensor({d}));
    maskmlp_w2_ = P("mask_mlp.w2", linear_init(d, d, rng));
    maskmlp_b2_ = P("mask_mlp.b2", Tensor({d}));
}

ad::Node* Proposer::attention(ad::Graph& g, ad::Node* q_in, ad::Node* k_in, ad::Node* v_in,
                              Parameter* wq, Parameter* wk, Parameter* wv, Parameter* wo) const {
    const int d = cfg_.embed_dim;
    const int dh = d / cfg_.n_heads;
    ad::Node* q = g.matmul(q_in, g.param(*wq), false, true);
    ad::Node* k = g.matmul(k_in, g.param(*wk), false, true);
    ad::Node* v = g.matmul(v_in, g.param(*wv), false, true);
    std::vector<ad::Node*> heads;
    for (int h = 0; h < cfg_.n_heads; ++h) {
        ad::Node* qh = g.slice_cols(q, h * dh, (h + 1) * dh);
        ad::Node* kh = g.slice_cols(k, h * dh, (h + 1) * dh);
        ad::Node* vh = g.slice_cols(v, h * dh, (h + 1) * dh);
        ad::Node* scores =
            g.scale(g.matmul(qh, kh, false, true), 1.0 / std::sqrt(static_cast<double>(dh)));
        ad::Node* ctx = g.matmul(g.softmax_rows(scores), vh);
        heads.push_back(ctx);
    }
    ad::Node* cat = heads[0];
    for (size_t h = 1; h < heads.size(); ++h) cat = g.concat_cols(cat, heads[static_cast<size_t>(h)]);
    return g.matmul(cat, g.param(*wo), false, true);
}

ProposalForward Proposer::forward(ad::Graph& g, const ImageF32& image, ad::Node* text_emb) const {
    if (cfg_.use_interaction && text_emb == nullptr)
        throw ConfigError("proposer: interaction enabled but no text embeddings given");
    const int h = image.h, w = image.w;
    if (h < 16 || w < 16) throw ConfigError("proposer: image too small");
    const int d = cfg_.embed_dim;

    Tensor img({3, h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) img(c, y, x) = static_cast<double>(image.at(y, x, c));
    ad::Node* x0 = g.constant(std::move(img));

    ad::Node* f1 = g.relu(g.conv2d(x0, g.param(*conv1_w_), g.param(*conv1_b_), 2, 1));
    ad::Node* f2 = g.relu(g.conv2d(f1, g.param(*conv2_w_), g.param(*conv2_b_), 2, 1));
    ad::Node* f3 = g.relu(g.conv2d(f2, g.param(*conv3_w_), g.param(*conv3_b_), 2, 1));
    g.check_finite(f3, "proposer.backbone");

    ad::Node* p3 = g.conv2d(f3, g.param(*proj3_w_), g.param(*proj3_b_), 1, 0); // (D, h/8, w/8)
    ad::Node* p2 = g.add(g.conv2d(f2, g.param(*proj2_w_), g.param(*proj2_b_), 1, 0),
                         g.upsample_bilinear(p3, f2->val.dim(1), f2->val.dim(2))); // (D, h/4, w/4)
    ad::Node* mask_feat = g.conv2d(p2, g.param(*maskfeat_w_), g.param(*maskfeat_b_), 1, 1);

    const int h3 = p3->val.dim(1), w3 = p3->val.dim(2);
    const int h2 = p2->val.dim(1), w2 = p2->val.dim(2);
    std::vector<ad::Node*> memories = {g.chw_to_tokens(p3), g.chw_to_tokens(p2)};
    std::vector<Tensor> mem_pos = {sinusoidal_positions(h3, w3, d), sinusoidal_positions(h2, w2, d)};

    ProposalForward out;
    ad::Node* q = g.param(*query_feat_); // (N, D)
    for (int z = 0; z < cfg_.decoder_layers; ++z) {
        const auto& L = layers_[static_cast<size_t>(z)];
        ad::Node* mem = memories[static_cast<size_t>(z % 2)];
        if (cfg_.use_interaction) {
            mem = semantic_context_interaction(g, mem, text_emb, g.param(*L.sci.wq),
                                               g.param(*L.sci.wk), g.param(*L.sci.wv),
                                               g.param(*L.sci.wh));
        }
        out.scale_tokens.push_back(mem);
        ad::Node* mem_k = g.add(mem, g.constant(mem_pos[static_cast<size_t>(z % 2)]));
        ad::Node* qn = g.layernorm_rows(q, g.param(*L.ln1_g), g.param(*L.ln1_b));
        q = g.add(q, attention(g, qn, mem_k, mem, L.ca_wq, L.ca_wk, L.ca_wv, L.ca_wo));
        qn = g.layernorm_rows(q, g.param(*L.ln2_g), g.param(*L.ln2_b));
        q = g.add(q, attention(g, qn, qn, qn, L.sa_wq, L.sa_wk, L.sa_wv, L.sa_wo));
        qn = g.layernorm_rows(q, g.param(*L.ln3_g), g.param(*L.ln3_b));
        ad::Node* ffn = g.matmul(
            g.relu(g.add_rowvec(g.matmul(qn, g.param(*L.ffn_w1), false, true), g.param(*L.ffn_b1))),
            g.param(*L.ffn_w2), false, true);
        q = g.add(q, g.add_rowvec(ffn, g.param(*L.ffn_b2)));
        g.check_finite(q, "proposer.decoder" + std::to_string(z));
    }

    ad::Node* qf = g.layernorm_rows(q, g.param(*final_ln_g_), g.param(*final_ln_b_));
    out.queries = g.add_rowvec(g.matmul(qf, g.param(*class_w_), false, true), g.param(*class_b_));

    ad::Node* me = g.add_rowvec(g.matmul(qf, g.param(*maskmlp_w1_), false, true), g.param(*maskmlp_b1_));
    me = g.add_rowvec(g.matmul(g.relu(me), g.param(*maskmlp_w2_), false, true), g.param(*maskmlp_b2_));
    ad::Node* mask_tokens = g.chw_to_tokens(mask_feat);         // (h2*w2, D)
    ad::Node* logits_flat = g.matmul(me, mask_tokens, false, true); // (N, h2*w2)
    out.mask_logits = g.reshape(logits_flat, {cfg_.n_queries, h2, w2});
    out.mask_logits_full = g.upsample_bilinear(out.mask_logits, h, w);
    g.check_finite(out.mask_logits_full, "proposer.mask_head");
    return out;
}

} // namespace freeseg::proposer
