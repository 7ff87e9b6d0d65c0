#include "freeseg/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>

#include "freeseg/errors.hpp"
#include "freeseg/hashing.hpp"

namespace freeseg::train {

namespace {

std::string tasks_to_string(const std::vector<Task>& mix) {
    std::string out;
    for (size_t i = 0; i < mix.size(); ++i) {
        if (i) out += ",";
        out += prompts::task_key(mix[i]);
    }
    return out;
}

std::vector<Task> tasks_from_string(const std::string& s) {
    std::vector<Task> out;
    std::istringstream in(s);
    std::string item;
    while (std::getline(in, item, ',')) {
        if (!item.empty()) out.push_back(prompts::task_from_string(item));
    }
    return out;
}

const std::vector<std::string>& config_keys() {
    static const std::vector<std::string> keys = {
        "learning_rate", "weight_decay", "iterations",  "batch_size",  "clip_norm",
        "lambda_focal",  "lambda_dice",  "lambda_cla",  "focal_gamma", "focal_alpha",
        "temperature",   "noobj_weight", "seed",        "task_mix",    "n_queries",
        "embed_dim",     "decoder_layers", "n_heads",   "ffn_hidden",  "n_task_ctx",
        "n_class_ctx",   "class_adaptive", "task_adaptive", "use_interaction",
        "model_seed",    "encoder_seed", "prompt_seed"};
    return keys;
}

} // namespace

TrainConfig TrainConfig::from_kv(const KVConfig& kv) {
    kv.require_known(config_keys());
    TrainConfig c;
    c.learning_rate = kv.get_double("learning_rate", c.learning_rate);
    c.weight_decay = kv.get_double("weight_decay", c.weight_decay);
    c.iterations = static_cast<int>(kv.get_int("iterations", c.iterations));
    c.batch_size = static_cast<int>(kv.get_int("batch_size", c.batch_size));
    c.clip_norm = kv.get_double("clip_norm", c.clip_norm);
    c.lambda_focal = kv.get_double("lambda_focal", c.lambda_focal);
    c.lambda_dice = kv.get_double("lambda_dice", c.lambda_dice);
    c.lambda_cla = kv.get_double("lambda_cla", c.lambda_cla);
    c.focal_gamma = kv.get_double("focal_gamma", c.focal_gamma);
    c.focal_alpha = kv.get_double("focal_alpha", c.focal_alpha);
    c.temperature = kv.get_double("temperature", c.temperature);
    c.noobj_weight = kv.get_double("noobj_weight", c.noobj_weight);
    c.seed = static_cast<uint64_t>(kv.get_int("seed", static_cast<int64_t>(c.seed)));
    if (kv.has("task_mix")) c.task_mix = tasks_from_string(kv.get_str("task_mix"));
    c.n_queries = static_cast<int>(kv.get_int("n_queries", c.n_queries));
    c.embed_dim = static_cast<int>(kv.get_int("embed_dim", c.embed_dim));
    c.decoder_layers = static_cast<int>(kv.get_int("decoder_layers", c.decoder_layers));
    c.n_heads = static_cast<int>(kv.get_int("n_heads", c.n_heads));
    c.ffn_hidden = static_cast<int>(kv.get_int("ffn_hidden", c.ffn_hidden));
    c.n_task_ctx = static_cast<int>(kv.get_int("n_task_ctx", c.n_task_ctx));
    c.n_class_ctx = static_cast<int>(kv.get_int("n_class_ctx", c.n_class_ctx));
    c.class_adaptive = kv.get_bool("class_adaptive", c.class_adaptive);
    c.task_adaptive = kv.get_bool("task_adaptive", c.task_adaptive);
    c.use_interaction = kv.get_bool("use_interaction", c.use_interaction);
    c.model_seed = static_cast<uint64_t>(kv.get_int("model_seed", static_cast<int64_t>(c.model_seed)));
    c.encoder_seed =
        static_cast<uint64_t>(kv.get_int("encoder_seed", static_cast<int64_t>(c.encoder_seed)));
    c.prompt_seed =
        static_cast<uint64_t>(kv.get_int("prompt_seed", static_cast<int64_t>(c.prompt_seed)));
    c.validate();
    return c;
}

KVConfig TrainConfig::to_kv() const {
    KVConfig kv;
    kv.set("learning_rate", std::to_string(learning_rate));
    kv.set("weight_decay", std::to_string(weight_decay));
    kv.set("iterations", std::to_string(iterations));
    kv.set("batch_size", std::to_string(batch_size));
    kv.set("clip_norm", std::to_string(clip_norm));
    kv.set("lambda_focal", std::to_string(lambda_focal));
    kv.set("lambda_dice", std::to_string(lambda_dice));
    kv.set("lambda_cla", std::to_string(lambda_cla));
    kv.set("focal_gamma", std::to_string(focal_gamma));
    kv.set("focal_alpha", std::to_string(focal_alpha));
    kv.set("temperature", std::to_string(temperature));
    kv.set("noobj_weight", std::to_string(noobj_weight));
    kv.set("seed", std::to_string(seed));
    kv.set("task_mix", tasks_to_string(task_mix));
    kv.set("n_queries", std::to_string(n_queries));
    kv.set("embed_dim", std::to_string(embed_dim));
    kv.set("decoder_layers", std::to_string(decoder_layers));
    kv.set("n_heads", std::to_string(n_heads));
    kv.set("ffn_hidden", std::to_string(ffn_hidden));
    kv.set("n_task_ctx", std::to_string(n_task_ctx));
    kv.set("n_class_ctx", std::to_string(n_class_ctx));
    kv.set("class_adaptive", class_adaptive ? "true" : "false");
    kv.set("task_adaptive", task_adaptive ? "true" : "false");
    kv.set("use_interaction", use_interaction ? "true" : "false");
    kv.set("model_seed", std::to_string(model_seed));
    kv.set("encoder_seed", std::to_string(encoder_seed));
    kv.set("prompt_seed", std::to_string(prompt_seed));
    return kv;
}

void TrainConfig::validate() const {
    if (learning_rate <= 0 || weight_decay < 0) throw ConfigError("bad optimizer rates");
    if (iterations < 0 || batch_size < 1) throw ConfigError("bad iteration/batch settings");
    if (lambda_focal <= 0 || lambda_dice <= 0 || lambda_cla <= 0)
        throw ConfigError("loss weights must be positive");
    if (temperature <= 0) throw ConfigError("temperature must be positive");
    if (noobj_weight <= 0) throw ConfigError("noobj_weight must be positive");
    if (task_mix.empty()) throw ConfigError("task_mix must be non-empty");
}

Task sample_task(Rng& rng, const std::vector<Task>& task_mix) {
    if (task_mix.empty()) throw ConfigError("sample_task: empty task mix");
    const auto i = rng.uniform_int(0, static_cast<int64_t>(task_mix.size()) - 1);
    return task_mix[static_cast<size_t>(i)];
}

Tensor cosine_similarity_map(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
        throw ConfigError("cosine_similarity_map: shape mismatch");
    if (!a.all_finite() || !b.all_finite())
        throw NumericFault("cosine_similarity_map: non-finite input");
    const int n = a.dim(0), c = b.dim(0), d = a.dim(1);
    std::vector<double> na(static_cast<size_t>(n)), nb(static_cast<size_t>(c));
    for (int i = 0; i < n; ++i) {
        double s = 0;
        for (int k = 0; k < d; ++k) s += a(i, k) * a(i, k);
        na[static_cast<size_t>(i)] = std::sqrt(s);
        if (!(na[static_cast<size_t>(i)] > 1e-30))
            throw NumericFault("cosine_similarity_map: zero-norm row");
    }
    for (int j = 0; j < c; ++j) {
        double s = 0;
        for (int k = 0; k < d; ++k) s += b(j, k) * b(j, k);
        nb[static_cast<size_t>(j)] = std::sqrt(s);
        if (!(nb[static_cast<size_t>(j)] > 1e-30))
            throw NumericFault("cosine_similarity_map: zero-norm row");
    }
    Tensor out({n, c});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j) {
            double s = 0;
            for (int k = 0; k < d; ++k) s += a(i, k) * b(j, k);
            out(i, j) = s / (na[static_cast<size_t>(i)] * nb[static_cast<size_t>(j)]);
        }
    return out;
}

Tensor build_match_cost(const Tensor& similarity, const Tensor& mask_logits,
                        const std::vector<GtTarget>& gt, const TrainConfig& cfg) {
    const int n = mask_logits.dim(0);
    const int g = static_cast<int>(gt.size());
    const int hw = mask_logits.dim(1) * mask_logits.dim(2);
    Tensor cost({g, n});
    for (int gi = 0; gi < g; ++gi) {
        const auto& t = gt[static_cast<size_t>(gi)];
        if (static_cast<int>(t.mask.size()) != hw)
            throw ConfigError("build_match_cost: mask shape mismatch");
        for (int q = 0; q < n; ++q) {
            Tensor row = Tensor::from({mask_logits.dim(1), mask_logits.dim(2)},
                                      std::vector<double>(mask_logits.data() + static_cast<size_t>(q) * hw,
                                                          mask_logits.data() + static_cast<size_t>(q + 1) * hw));
            const double lf = ad::focal_loss_value(row, t.mask, cfg.focal_gamma, cfg.focal_alpha);
            const double ld = ad::dice_loss_value(row, t.mask, 1.0);
            const double lc = -similarity(q, t.class_index);
            cost(gi, q) = cfg.lambda_cla * lc + cfg.lambda_focal * lf + cfg.lambda_dice * ld;
        }
    }
    return cost;
}

MatchResult hungarian_match_cost(const Tensor& cost) {
    const int g = cost.dim(0), n = cost.dim(1);
    if (g > n) throw ConfigError("hungarian_match: more ground-truth segments than queries");
    MatchResult res;
    if (g == 0) {
        for (int q = 0; q < n; ++q) res.unmatched_queries.push_back(q);
        return res;
    }
    // Jonker-Volgenant style shortest augmenting path with potentials.
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(static_cast<size_t>(g) + 1, 0.0), v(static_cast<size_t>(n) + 1, 0.0);
    std::vector<int> p(static_cast<size_t>(n) + 1, 0), way(static_cast<size_t>(n) + 1, 0);
    for (int i = 1; i <= g; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(static_cast<size_t>(n) + 1, inf);
        std::vector<bool> used(static_cast<size_t>(n) + 1, false);
        do {
            used[static_cast<size_t>(j0)] = true;
            const int i0 = p[static_cast<size_t>(j0)];
            double delta = inf;
            int j1 = -1;
            for (int j = 1; j <= n; ++j) {
                if (used[static_cast<size_t>(j)]) continue;
                const double cur = cost(i0 - 1, j - 1) - u[static_cast<size_t>(i0)] - v[static_cast<size_t>(j)];
                if (cur < minv[static_cast<size_t>(j)]) {
                    minv[static_cast<size_t>(j)] = cur;
                    way[static_cast<size_t>(j)] = j0;
                }
                if (minv[static_cast<size_t>(j)] < delta) {
                    delta = minv[static_cast<size_t>(j)];
                    j1 = j;
                }
            }
            for (int j = 0; j <= n; ++j) {
                if (used[static_cast<size_t>(j)]) {
                    u[static_cast<size_t>(p[static_cast<size_t>(j)])] += delta;
                    v[static_cast<size_t>(j)] -= delta;
                } else {
                    minv[static_cast<size_t>(j)] -= delta;
                }
            }
            j0 = j1;
        } while (p[static_cast<size_t>(j0)] != 0);
        do {
            const int j1 = way[static_cast<size_t>(j0)];
            p[static_cast<size_t>(j0)] = p[static_cast<size_t>(j1)];
            j0 = j1;
        } while (j0);
    }
    std::vector<int> query_of_gt(static_cast<size_t>(g), -1);
    for (int j = 1; j <= n; ++j)
        if (p[static_cast<size_t>(j)] > 0) query_of_gt[static_cast<size_t>(p[static_cast<size_t>(j)]) - 1] = j - 1;
    std::vector<bool> taken(static_cast<size_t>(n), false);
    for (int gi = 0; gi < g; ++gi) {
        res.pairs.emplace_back(query_of_gt[static_cast<size_t>(gi)], gi);
        taken[static_cast<size_t>(query_of_gt[static_cast<size_t>(gi)])] = true;
    }
    std::sort(res.pairs.begin(), res.pairs.end());
    for (int q = 0; q < n; ++q)
        if (!taken[static_cast<size_t>(q)]) res.unmatched_queries.push_back(q);
    return res;
}

MatchResult hungarian_match(const Tensor& similarity, const Tensor& mask_logits,
                            const std::vector<GtTarget>& gt, const TrainConfig& cfg) {
    return hungarian_match_cost(build_match_cost(similarity, mask_logits, gt, cfg));
}

ad::Node* classification_loss(ad::Graph& g, ad::Node* similarity_with_noobj,
                              const MatchResult& match, const std::vector<GtTarget>& gt,
                              double temperature, double noobj_weight) {
    const int n = similarity_with_noobj->val.dim(0);
    const int cols = similarity_with_noobj->val.dim(1);
    std::vector<int> targets(static_cast<size_t>(n), cols - 1); // no-object column
    std::vector<double> weights(static_cast<size_t>(n), noobj_weight);
    for (const auto& [q, gi] : match.pairs) {
        targets[static_cast<size_t>(q)] = gt[static_cast<size_t>(gi)].class_index;
        weights[static_cast<size_t>(q)] = 1.0;
    }
    ad::Node* logits = g.scale(similarity_with_noobj, 1.0 / temperature);
    return g.ce_rows(logits, targets, weights, static_cast<double>(n));
}

double classification_loss_value(const Tensor& similarity_with_noobj, const MatchResult& match,
                                 const std::vector<GtTarget>& gt, double temperature,
                                 double noobj_weight) {
    ad::Graph g;
    return classification_loss(g, g.leaf(similarity_with_noobj), match, gt, temperature,
                               noobj_weight)
        ->val[0];
}

std::vector<GtTarget> task_targets(const synth::Scene& scene, Task task,
                                   const synth::CategorySet& cats,
                                   const std::vector<int>& class_ids) {
    std::map<int, int> local; // global class id -> column index
    for (size_t i = 0; i < class_ids.size(); ++i) local[class_ids[i]] = static_cast<int>(i);
    auto local_of = [&](int gid) {
        auto it = local.find(gid);
        if (it == local.end())
            throw DataError("contamination: training labels reference class '" +
                            cats.classes[static_cast<size_t>(gid)].name +
                            "' outside the requested class list");
        return it->second;
    };
    const int h = scene.image.h, w = scene.image.w;
    auto mask_to_tensor = [&](const MaskU8& m) {
        Tensor t({h, w});
        for (int64_t i = 0; i < t.size(); ++i) t[i] = m.px[static_cast<size_t>(i)] ? 1.0 : 0.0;
        return t;
    };

    std::vector<GtTarget> out;
    switch (task) {
        case Task::Semantic: {
            // one binary mask per class present (stuff and things merged per class)
            std::map<int, Tensor> per_class;
            for (const auto& seg : scene.pan_gt) {
                auto [it, fresh] = per_class.try_emplace(seg.class_id, Tensor({h, w}));
                Tensor& t = it->second;
                for (int64_t i = 0; i < t.size(); ++i)
                    if (seg.mask.px[static_cast<size_t>(i)]) t[i] = 1.0;
            }
            for (auto& [gid, mask] : per_class)
                out.push_back(GtTarget{std::move(mask), local_of(gid)});
            break;
        }
        case Task::Instance: {
            for (const auto& inst : scene.ins_gt)
                out.push_back(GtTarget{mask_to_tensor(inst.mask), local_of(inst.class_id)});
            break;
        }
        case Task::Panoptic: {
            for (const auto& seg : scene.pan_gt)
                out.push_back(GtTarget{mask_to_tensor(seg.mask), local_of(seg.class_id)});
            break;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Model / Trainer
// ---------------------------------------------------------------------------

std::unique_ptr<Model> Model::build(const synth::CategorySet& cats, const TrainConfig& cfg) {
    cfg.validate();
    auto m = std::make_unique<Model>();
    m->cats = cats;
    m->cfg = cfg;
    concepts::ConceptEncoderConfig ec;
    ec.token_dim = cfg.embed_dim;
    ec.out_dim = cfg.embed_dim;
    ec.seed = cfg.encoder_seed;
    m->encoder = std::make_unique<concepts::ConceptEncoder>(cats, ec);
    m->region_encoder = std::make_unique<concepts::RegionEncoder>(*m->encoder, cats);

    prompts::PromptBankConfig pc;
    pc.n_task_ctx = cfg.n_task_ctx;
    pc.n_class_ctx = cfg.n_class_ctx;
    pc.token_dim = cfg.embed_dim;
    pc.class_adaptive = cfg.class_adaptive;
    pc.task_adaptive = cfg.task_adaptive;
    pc.seed = cfg.prompt_seed;
    m->bank = std::make_unique<prompts::PromptBank>(m->store, *m->encoder, pc);

    proposer::ProposerConfig nc;
    nc.n_queries = cfg.n_queries;
    nc.embed_dim = cfg.embed_dim;
    nc.decoder_layers = cfg.decoder_layers;
    nc.n_heads = cfg.n_heads;
    nc.ffn_hidden = cfg.ffn_hidden;
    nc.use_interaction = cfg.use_interaction;
    nc.seed = cfg.model_seed;
    m->net = std::make_unique<proposer::Proposer>(m->store, nc);
    return m;
}

std::vector<std::string> Model::seen_class_names() const {
    std::vector<std::string> out;
    for (int id : cats.seen_ids) out.push_back(cats.classes[static_cast<size_t>(id)].name);
    return out;
}

std::vector<int> Model::seen_class_ids() const { return cats.seen_ids; }

uint64_t Model::parameter_hash() const {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto* p : const_cast<ParamStore&>(store).all()) {
        h = hash_bytes(p->name, h);
        h = hash_tensor(p->value, h);
    }
    h = encoder->params_hash() ^ (h * 0x9e3779b97f4a7c15ull);
    h ^= region_encoder->params_hash();
    return h;
}

Trainer::Trainer(Model& model, const std::vector<synth::Scene>& dataset)
    : model_(model), data_(dataset), rng_(model.cfg.seed ^ 0x7a51f00dull) {
    opt_.lr = model.cfg.learning_rate;
    opt_.weight_decay = model.cfg.weight_decay;
    if (dataset.empty()) throw ConfigError("trainer: empty dataset");
    // capacity check: queries must cover the densest scene with headroom
    int max_segments = 0;
    for (const auto& sc : dataset)
        max_segments = std::max(max_segments, static_cast<int>(sc.pan_gt.size()));
    if (model.cfg.n_queries < max_segments + 4)
        throw ConfigError("trainer: n_queries must be >= max segments per scene + 4");
}

IterationStats Trainer::step() {
    Model& m = model_;
    const auto names = m.seen_class_names();
    const auto ids = m.seen_class_ids();
    const int n_classes = static_cast<int>(names.size());

    const Task task = sample_task(rng_, m.cfg.task_mix);
    IterationStats stats;
    stats.task = task;

    m.store.zero_grads();
    for (int b = 0; b < m.cfg.batch_size; ++b) {
        const auto& scene =
            data_[static_cast<size_t>(rng_.uniform_int(0, static_cast<int64_t>(data_.size()) - 1))];
        // seen-only guard: training must never see unseen-class labels
        for (const auto& seg : scene.pan_gt)
            if (!m.cats.is_seen(seg.class_id))
                throw DataError("contamination: unseen class '" +
                                m.cats.classes[static_cast<size_t>(seg.class_id)].name +
                                "' in training labels");

        ad::Graph g;
        ad::Node* text = m.bank->text_embeddings(g, names, task); // (C, D)
        const auto fwd = m.net->forward(g, scene.image, m.cfg.use_interaction ? text : nullptr);
        ad::Node* fv_n = g.l2_normalize_rows(fwd.queries);
        ad::Node* ft_n = g.l2_normalize_rows(text);
        ad::Node* sim = g.matmul(fv_n, ft_n, false, true); // (N, C) cosine
        ad::Node* sim_noobj = g.matmul(fv_n, m.bank->no_object_embedding(g), false, true); // (N,1)
        ad::Node* s_full = g.concat_cols(sim, sim_noobj);

        const auto gt = task_targets(scene, task, m.cats, ids);
        if (static_cast<int>(gt.size()) > m.cfg.n_queries)
            throw ConfigError("capacity error: more GT segments than queries");
        const MatchResult match =
            hungarian_match(s_full->val, fwd.mask_logits_full->val, gt, m.cfg);

        ad::Node* l_cla =
            classification_loss(g, s_full, match, gt, m.cfg.temperature, m.cfg.noobj_weight);
        ad::Node* l_focal = nullptr;
        ad::Node* l_dice = nullptr;
        for (const auto& [q, gi] : match.pairs) {
            ad::Node* row = g.select_channel(fwd.mask_logits_full, q);
            ad::Node* lf =
                g.sigmoid_focal_loss(row, gt[static_cast<size_t>(gi)].mask, m.cfg.focal_gamma,
                                     m.cfg.focal_alpha);
            ad::Node* ld = g.dice_loss(row, gt[static_cast<size_t>(gi)].mask, 1.0);
            l_focal = l_focal ? g.add(l_focal, lf) : lf;
            l_dice = l_dice ? g.add(l_dice, ld) : ld;
        }
        const double inv_pairs = match.pairs.empty() ? 0.0 : 1.0 / match.pairs.size();
        ad::Node* total = l_cla;
        if (l_focal) {
            total = g.add(total, g.scale(l_focal, m.cfg.lambda_focal * inv_pairs));
            total = g.add(total, g.scale(l_dice, m.cfg.lambda_dice * inv_pairs));
        }
        total = g.scale(total, 1.0 / m.cfg.batch_size);
        if (!total->val.all_finite())
            throw NumericFault("non-finite loss at iteration " + std::to_string(iteration_));
        g.backward(total);

        stats.loss += total->val[0];
        stats.loss_cla += l_cla->val[0] / m.cfg.batch_size;
        if (l_focal) {
            stats.loss_focal += l_focal->val[0] * inv_pairs / m.cfg.batch_size;
            stats.loss_dice += l_dice->val[0] * inv_pairs / m.cfg.batch_size;
        }
    }

    auto trainable = m.store.trainable();
    clip_grad_norm(trainable, m.cfg.clip_norm);
    opt_.step(trainable);
    ++iteration_;
    stats.iteration = iteration_;
    return stats;
}

void Trainer::run(int64_t n, const std::function<void(const IterationStats&)>& on_iter) {
    for (int64_t i = 0; i < n; ++i) {
        const auto stats = step();
        if (on_iter) on_iter(stats);
    }
}

void Trainer::restore(int64_t iteration, const std::array<uint64_t, 4>& rng_state, int64_t adam_t) {
    iteration_ = iteration;
    rng_.set_state(rng_state);
    opt_.t = adam_t;
}

} // namespace freeseg::train
