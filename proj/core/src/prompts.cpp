#include "freeseg/prompts.hpp"

#include <sstream>

#include "freeseg/errors.hpp"

namespace freeseg::prompts {

const std::vector<Task>& all_tasks() {
    static const std::vector<Task> v = {Task::Semantic, Task::Instance, Task::Panoptic};
    return v;
}

std::string task_name(Task t) {
    switch (t) {
        case Task::Semantic: return "semantic segmentation.";
        case Task::Instance: return "instance segmentation.";
        case Task::Panoptic: return "panoptic segmentation.";
    }
    throw ConfigError("unknown task");
}

std::vector<std::string> task_name_words(Task t) {
    std::vector<std::string> out;
    std::istringstream in(task_name(t));
    std::string w;
    while (in >> w) out.push_back(w);
    return out;
}

Task task_from_string(const std::string& s) {
    if (s == "semantic") return Task::Semantic;
    if (s == "instance") return Task::Instance;
    if (s == "panoptic") return Task::Panoptic;
    throw ConfigError("unknown task name: " + s + " (expected semantic|instance|panoptic)");
}

std::string task_key(Task t) {
    switch (t) {
        case Task::Semantic: return "semantic";
        case Task::Instance: return "instance";
        case Task::Panoptic: return "panoptic";
    }
    throw ConfigError("unknown task");
}

namespace {

std::vector<std::string> split_words(const std::string& name) {
    std::vector<std::string> out;
    std::istringstream in(name);
    std::string w;
    while (in >> w) out.push_back(w);
    return out;
}

} // namespace

PromptBank::PromptBank(ParamStore& store, const concepts::ConceptEncoder& enc,
                       const PromptBankConfig& cfg)
    : cfg_(cfg), enc_(&enc) {
    if (cfg_.token_dim != enc.token_dim())
        throw ConfigError("prompt bank token_dim must match the concept encoder");
    if (cfg_.n_task_ctx < 2 || cfg_.n_task_ctx % 2 != 0 || cfg_.n_class_ctx < 2 ||
        cfg_.n_class_ctx % 2 != 0)
        throw ConfigError("context lengths must be even and >= 2");

    Rng rng(cfg_.seed);
    const std::vector<std::string> class_tmpl_pre = {"a", "photo", "of"};
    const std::vector<std::string> class_tmpl_post = {"."};
    const std::vector<std::string> task_tmpl_pre = {"for"};
    const std::vector<std::string> task_tmpl_post = {"."};

    auto make_ctx = [&](const char* name, bool adaptive, int n_ctx,
                        const std::vector<std::string>& tmpl_pre,
                        const std::vector<std::string>& tmpl_post, int& pre_out) -> Parameter* {
        if (adaptive) {
            pre_out = n_ctx / 2;
            return &store.create(name, Tensor::randn({n_ctx, cfg_.token_dim}, rng, cfg_.init_std));
        }
        pre_out = static_cast<int>(tmpl_pre.size());
        std::vector<std::string> words = tmpl_pre;
        words.insert(words.end(), tmpl_post.begin(), tmpl_post.end());
        // frozen slots hold the token encodings of the literal template words
        Tensor rows({static_cast<int>(words.size()), cfg_.token_dim});
        for (size_t i = 0; i < words.size(); ++i) {
            const auto& mw = enc.words();
            int idx = -1;
            for (size_t k = 0; k < mw.size(); ++k)
                if (mw[k] == words[i]) idx = static_cast<int>(k);
            if (idx < 0) throw ConfigError("template word missing from vocabulary: " + words[i]);
            for (int d = 0; d < cfg_.token_dim; ++d) rows(static_cast<int>(i), d) = enc.word_matrix()(idx, d);
        }
        return &store.create(name, std::move(rows), /*frozen=*/true);
    };

    class_ctx_ = make_ctx("prompts.class_context", cfg_.class_adaptive, cfg_.n_class_ctx,
                          class_tmpl_pre, class_tmpl_post, class_pre_);
    task_ctx_ = make_ctx("prompts.task_context", cfg_.task_adaptive, cfg_.n_task_ctx,
                         task_tmpl_pre, task_tmpl_post, task_pre_);

    const int d = enc.dim();
    Tensor fusion({d, 2 * d});
    for (int i = 0; i < d; ++i) fusion(i, i) = 1.0; // [I | 0]: fusion starts class-only
    fusion_w_ = &store.create("prompts.fusion_w", std::move(fusion));
    no_object_ = &store.create("prompts.no_object", Tensor::randn({d}, rng, 0.3));
}

std::vector<concepts::GraphToken> PromptBank::prompt_sequence(
    ad::Graph& g, Parameter& ctx, int n_pre, bool adaptive,
    const std::vector<std::string>& name_words) const {
    const int n_rows = ctx.value.dim(0);
    ad::Node* rows = adaptive ? g.param(ctx) : g.constant(ctx.value);
    std::vector<concepts::GraphToken> seq;
    for (int i = 0; i < n_pre; ++i)
        seq.push_back({"", g.gather_rows(rows, {i})});
    for (const auto& w : name_words) seq.push_back({w, nullptr});
    for (int i = n_pre; i < n_rows; ++i)
        seq.push_back({"", g.gather_rows(rows, {i})});
    return seq;
}

ad::Node* PromptBank::build_task_embedding(ad::Graph& g, Task t) const {
    const auto seq =
        prompt_sequence(g, *task_ctx_, task_pre_, cfg_.task_adaptive, task_name_words(t));
    return enc_->encode(g, seq);
}

ad::Node* PromptBank::build_class_embeddings(ad::Graph& g,
                                             const std::vector<std::string>& class_names) const {
    if (class_names.empty()) throw ConfigError("build_class_embeddings: empty class list");
    std::vector<ad::Node*> rows;
    for (const auto& name : class_names) {
        const auto seq =
            prompt_sequence(g, *class_ctx_, class_pre_, cfg_.class_adaptive, split_words(name));
        rows.push_back(enc_->encode(g, seq));
    }
    return g.stack_rows(rows);
}

ad::Node* PromptBank::fuse(ad::Graph& g, ad::Node* class_emb, ad::Node* task_emb) const {
    if (class_emb->val.rank() != 2 || task_emb->val.size() != class_emb->val.dim(1))
        throw ConfigError("fuse: expected (C,D) class embeddings and a D task embedding");
    const int c = class_emb->val.dim(0), d = class_emb->val.dim(1);
    ad::Node* task_row = g.reshape(task_emb, {1, d});
    ad::Node* ones = g.constant(Tensor::full({c, 1}, 1.0));
    ad::Node* task_bcast = g.matmul(ones, task_row); // (C,D), broadcast of E_t
    ad::Node* cat = g.concat_cols(class_emb, task_bcast);
    ad::Node* w = g.param(*fusion_w_);
    return g.l2_normalize_rows(g.matmul(cat, w, false, true));
}

ad::Node* PromptBank::text_embeddings(ad::Graph& g, const std::vector<std::string>& class_names,
                                      Task t) const {
    return fuse(g, build_class_embeddings(g, class_names), build_task_embedding(g, t));
}

ad::Node* PromptBank::no_object_embedding(ad::Graph& g) const {
    return g.l2_normalize_rows(g.reshape(g.param(*no_object_), {1, static_cast<int>(no_object_->value.size())}));
}

Tensor PromptBank::task_embedding_value(Task t) const {
    ad::Graph g;
    return build_task_embedding(g, t)->val;
}

Tensor PromptBank::class_embeddings_value(const std::vector<std::string>& class_names) const {
    ad::Graph g;
    return build_class_embeddings(g, class_names)->val;
}

Tensor PromptBank::text_embeddings_value(const std::vector<std::string>& class_names,
                                         Task t) const {
    ad::Graph g;
    return text_embeddings(g, class_names, t)->val;
}

Tensor PromptBank::no_object_value() const {
    ad::Graph g;
    return no_object_embedding(g)->val;
}

std::vector<Parameter*> PromptBank::tunable_parameters(TuneScope scope) const {
    std::vector<Parameter*> out;
    if (scope == TuneScope::ClassOnly) {
        if (cfg_.class_adaptive) out.push_back(class_ctx_);
        return out;
    }
    if (cfg_.class_adaptive) out.push_back(class_ctx_);
    if (cfg_.task_adaptive) out.push_back(task_ctx_);
    out.push_back(fusion_w_);
    return out;
}

} // namespace freeseg::prompts
