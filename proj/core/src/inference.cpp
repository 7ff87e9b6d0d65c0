#include "freeseg/inference.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "freeseg/errors.hpp"
#include "freeseg/hashing.hpp"

namespace freeseg::infer {

void TTPTConfig::validate() const {
    if (steps < 1) throw ConfigError("ttpt: steps must be >= 1");
    if (lr <= 0) throw ConfigError("ttpt: lr must be positive");
}

double default_tau(int n_unseen) {
    if (n_unseen < 2) return 0.5; // single-class entropy is always 0
    return 0.5 * std::log(static_cast<double>(n_unseen)) / n_unseen;
}

TaskRequest TaskRequest::over_vocabulary(const synth::CategorySet& cats, Task task) {
    TaskRequest r;
    r.task = task;
    for (int id = 0; id < cats.size(); ++id) {
        r.class_names.push_back(cats.classes[static_cast<size_t>(id)].name);
        r.class_ids.push_back(id);
        r.treat_unseen.push_back(cats.is_unseen(id));
        r.is_thing.push_back(cats.is_thing(id));
    }
    return r;
}

TaskRequest TaskRequest::all_unseen(const synth::CategorySet& cats, Task task) {
    TaskRequest r = over_vocabulary(cats, task);
    std::fill(r.treat_unseen.begin(), r.treat_unseen.end(), true);
    return r;
}

void TaskRequest::validate() const {
    if (class_names.empty()) throw ConfigError("task request: empty class list");
    if (class_ids.size() != class_names.size() || treat_unseen.size() != class_names.size() ||
        is_thing.size() != class_names.size())
        throw ConfigError("task request: ragged per-class fields");
    if (ensemble_weight < 0.0 || ensemble_weight > 1.0)
        throw ConfigError("task request: ensemble weight must be in [0,1]");
    if (ttpt) ttpt->validate();
}

std::vector<int> TaskRequest::unseen_columns() const {
    std::vector<int> out;
    for (size_t i = 0; i < treat_unseen.size(); ++i)
        if (treat_unseen[i]) out.push_back(static_cast<int>(i));
    return out;
}

void PanopticOutput::validate() const {
    std::set<int> in_map;
    for (int32_t v : segment_map.v) {
        if (v < 0) throw DataError("panoptic output: negative segment id");
        if (v > 0) in_map.insert(v);
    }
    std::set<int> listed;
    for (const auto& s : segments) {
        if (s.id <= 0) throw DataError("panoptic output: segment ids must be positive");
        if (!listed.insert(s.id).second) throw DataError("panoptic output: duplicate segment id");
    }
    for (int id : in_map)
        if (!listed.count(id)) throw DataError("panoptic output: map id missing from segment list");
    for (int id : listed)
        if (!in_map.count(id)) throw DataError("panoptic output: empty segment " + std::to_string(id));
}

PanopticOutput PanopticOutput::from_segments(const std::vector<synth::Segment>& segs,
                                             const synth::CategorySet& cats, int h, int w) {
    PanopticOutput out;
    out.segment_map = IntMap::filled(h, w, 0);
    for (const auto& seg : segs) {
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                if (!seg.mask.at(y, x)) continue;
                if (out.segment_map.at(y, x) != 0)
                    throw DataError("panoptic output: overlapping segments in input");
                out.segment_map.at(y, x) = seg.segment_id;
            }
        out.segments.push_back(
            PanSegment{seg.segment_id, seg.class_id, cats.is_thing(seg.class_id), 1.0});
    }
    out.validate();
    return out;
}

RawOutputs forward_values(const train::Model& model, const ImageF32& image,
                          const std::vector<std::string>& class_names, Task task) {
    ad::Graph g;
    auto& m = const_cast<train::Model&>(model);
    ad::Node* text = m.bank->text_embeddings(g, class_names, task);
    const auto fwd = m.net->forward(g, image, m.cfg.use_interaction ? text : nullptr);
    RawOutputs out;
    out.queries = fwd.queries->val;
    out.mask_probs = fwd.mask_logits_full->val;
    for (int64_t i = 0; i < out.mask_probs.size(); ++i)
        out.mask_probs[i] = 1.0 / (1.0 + std::exp(-out.mask_probs[i]));
    return out;
}

namespace {

std::vector<double> softmax(const std::vector<double>& v) {
    const double mx = *std::max_element(v.begin(), v.end());
    std::vector<double> out(v.size());
    double s = 0.0;
    for (size_t i = 0; i < v.size(); ++i) {
        out[i] = std::exp(v[i] - mx);
        s += out[i];
    }
    for (auto& x : out) x /= s;
    return out;
}

MaskU8 binarize(const Tensor& probs, int q, double thresh = 0.5) {
    const int h = probs.dim(1), w = probs.dim(2);
    MaskU8 m{h, w, std::vector<uint8_t>(static_cast<size_t>(h) * w, 0)};
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (probs(q, y, x) > thresh) m.at(y, x) = 1;
    return m;
}

} // namespace

Tensor classify_masks_per_class(const train::Model& model, const Tensor& queries,
                                const Tensor& text_emb, const Tensor& mask_probs,
                                const ImageF32& image, const std::vector<double>& lambda_per_class) {
    const int n = queries.dim(0), c = text_emb.dim(0);
    if (static_cast<int>(lambda_per_class.size()) != c)
        throw ConfigError("classify_masks: lambda vector size mismatch");
    const Tensor s_query = train::cosine_similarity_map(queries, text_emb);
    const double temp = model.cfg.temperature;
    bool any_region = false;
    for (double l : lambda_per_class) any_region |= l > 0.0;

    Tensor scores({n, c});
    for (int q = 0; q < n; ++q) {
        std::vector<double> sq(static_cast<size_t>(c));
        for (int j = 0; j < c; ++j) sq[static_cast<size_t>(j)] = s_query(q, j) / temp;
        const auto pq = softmax(sq);

        std::vector<double> pr;
        bool region_ok = false;
        if (any_region) {
            const MaskU8 bin = binarize(mask_probs, q);
            if (!bin.empty_mask()) {
                const Tensor emb = model.region_encoder->encode_region(image, bin);
                Tensor emb_row = Tensor::from({1, static_cast<int>(emb.size())},
                                              std::vector<double>(emb.data(), emb.data() + emb.size()));
                const Tensor s_region = train::cosine_similarity_map(emb_row, text_emb);
                std::vector<double> sr(static_cast<size_t>(c));
                for (int j = 0; j < c; ++j) sr[static_cast<size_t>(j)] = s_region(0, j) / temp;
                pr = softmax(sr);
                region_ok = true;
            }
        }
        double row_sum = 0.0;
        for (int j = 0; j < c; ++j) {
            const double lam = region_ok ? lambda_per_class[static_cast<size_t>(j)] : 0.0;
            const double v = std::pow(pq[static_cast<size_t>(j)], 1.0 - lam) *
                             (lam > 0.0 ? std::pow(pr[static_cast<size_t>(j)], lam) : 1.0);
            scores(q, j) = v;
            row_sum += v;
        }
        if (!(row_sum > 0.0)) throw NumericFault("classify_masks: degenerate score row");
        for (int j = 0; j < c; ++j) scores(q, j) /= row_sum;
    }
    return scores;
}

Tensor classify_masks(const train::Model& model, const Tensor& queries, const Tensor& text_emb,
                      const Tensor& mask_probs, const ImageF32& image, double lambda_e) {
    if (lambda_e < 0.0 || lambda_e > 1.0) throw ConfigError("classify_masks: lambda_e in [0,1]");
    return classify_masks_per_class(model, queries, text_emb, mask_probs, image,
                                    std::vector<double>(static_cast<size_t>(text_emb.dim(0)), lambda_e));
}

IntMap semantic_inference(const Tensor& mask_probs, const Tensor& class_scores) {
    const int n = mask_probs.dim(0), h = mask_probs.dim(1), w = mask_probs.dim(2);
    const int c = class_scores.dim(1);
    if (class_scores.dim(0) != n) throw ConfigError("semantic_inference: query count mismatch");
    IntMap out = IntMap::filled(h, w, 0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double best = -1.0;
            int best_c = 0;
            for (int j = 0; j < c; ++j) {
                double acc = 0.0;
                for (int q = 0; q < n; ++q) acc += class_scores(q, j) * mask_probs(q, y, x);
                if (acc > best) { // strict: ties keep the lowest class index
                    best = acc;
                    best_c = j;
                }
            }
            out.at(y, x) = best_c;
        }
    return out;
}

std::vector<PredInstance> instance_inference(const Tensor& mask_probs, const Tensor& class_scores,
                                             const TaskRequest& req) {
    const int n = mask_probs.dim(0);
    const int c = class_scores.dim(1);
    struct Cand {
        double score;
        int q, j;
        MaskU8 mask;
        double mask_conf;
    };
    std::vector<Cand> cands;
    for (int q = 0; q < n; ++q) {
        const MaskU8 bin = binarize(mask_probs, q);
        if (bin.empty_mask()) continue;
        double conf = 0.0;
        int64_t area = 0;
        for (int y = 0; y < bin.h; ++y)
            for (int x = 0; x < bin.w; ++x)
                if (bin.at(y, x)) {
                    conf += mask_probs(q, y, x);
                    ++area;
                }
        conf /= static_cast<double>(area);
        for (int j = 0; j < c; ++j) {
            if (!req.is_thing[static_cast<size_t>(j)]) continue;
            const double s = class_scores(q, j) * conf;
            if (s < req.instance_score_floor) continue;
            cands.push_back(Cand{s, q, j, bin, conf});
        }
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.q != b.q) return a.q < b.q;
        return a.j < b.j;
    });
    if (static_cast<int>(cands.size()) > req.max_instances) cands.resize(static_cast<size_t>(req.max_instances));
    std::vector<PredInstance> out;
    for (auto& cd : cands)
        out.push_back(PredInstance{std::move(cd.mask), req.class_ids[static_cast<size_t>(cd.j)], cd.score});
    return out;
}

PanopticOutput panoptic_inference(const Tensor& mask_probs, const Tensor& class_scores,
                                  const TaskRequest& req) {
    const int n = mask_probs.dim(0), h = mask_probs.dim(1), w = mask_probs.dim(2);
    const int c = class_scores.dim(1);

    // per-query best class and score
    std::vector<int> cls(static_cast<size_t>(n));
    std::vector<double> score(static_cast<size_t>(n));
    for (int q = 0; q < n; ++q) {
        int bj = 0;
        double bs = -1.0;
        for (int j = 0; j < c; ++j)
            if (class_scores(q, j) > bs) {
                bs = class_scores(q, j);
                bj = j;
            }
        cls[static_cast<size_t>(q)] = bj;
        score[static_cast<size_t>(q)] = bs;
    }

    // pixel -> query with the largest score-weighted mask probability,
    // provided that query's probability clears 0.5 there.
    IntMap assign = IntMap::filled(h, w, -1);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double best = 0.0;
            int bq = -1;
            for (int q = 0; q < n; ++q) {
                const double v = score[static_cast<size_t>(q)] * mask_probs(q, y, x);
                if (mask_probs(q, y, x) > 0.5 && v > best) {
                    best = v;
                    bq = q;
                }
            }
            assign.at(y, x) = bq;
        }

    // drop segments whose surviving area is a small fraction of their mask
    std::vector<int64_t> kept(static_cast<size_t>(n), 0), full(static_cast<size_t>(n), 0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int q = assign.at(y, x);
            if (q >= 0) ++kept[static_cast<size_t>(q)];
            for (int qq = 0; qq < n; ++qq)
                if (mask_probs(qq, y, x) > 0.5) ++full[static_cast<size_t>(qq)];
        }
    std::vector<bool> keep(static_cast<size_t>(n), false);
    for (int q = 0; q < n; ++q)
        keep[static_cast<size_t>(q)] =
            full[static_cast<size_t>(q)] > 0 &&
            static_cast<double>(kept[static_cast<size_t>(q)]) >=
                req.panoptic_overlap_thresh * static_cast<double>(full[static_cast<size_t>(q)]);

    // merge same-class stuff queries into one segment
    PanopticOutput out;
    out.segment_map = IntMap::filled(h, w, 0);
    std::map<int, int> stuff_segment; // local class -> segment id
    std::vector<int> seg_of_query(static_cast<size_t>(n), 0);
    int next_id = 1;
    for (int q = 0; q < n; ++q) {
        if (!keep[static_cast<size_t>(q)]) continue;
        const int j = cls[static_cast<size_t>(q)];
        const bool thing = req.is_thing[static_cast<size_t>(j)];
        int sid;
        if (!thing) {
            auto it = stuff_segment.find(j);
            if (it != stuff_segment.end()) {
                sid = it->second;
                for (auto& s : out.segments)
                    if (s.id == sid) s.score = std::max(s.score, score[static_cast<size_t>(q)]);
            } else {
                sid = next_id++;
                stuff_segment[j] = sid;
                out.segments.push_back(PanSegment{sid, req.class_ids[static_cast<size_t>(j)], false,
                                                  score[static_cast<size_t>(q)]});
            }
        } else {
            sid = next_id++;
            out.segments.push_back(
                PanSegment{sid, req.class_ids[static_cast<size_t>(j)], true, score[static_cast<size_t>(q)]});
        }
        seg_of_query[static_cast<size_t>(q)] = sid;
    }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int q = assign.at(y, x);
            if (q >= 0 && keep[static_cast<size_t>(q)])
                out.segment_map.at(y, x) = seg_of_query[static_cast<size_t>(q)];
        }
    // prune segments that ended with zero pixels (fully overwritten)
    std::set<int> present;
    for (int32_t v : out.segment_map.v)
        if (v > 0) present.insert(v);
    out.segments.erase(std::remove_if(out.segments.begin(), out.segments.end(),
                                      [&](const PanSegment& s) { return !present.count(s.id); }),
                       out.segments.end());
    out.validate();
    return out;
}

TaskOutput run_request(const train::Model& model, const ImageF32& image, const TaskRequest& req) {
    req.validate();
    const Tensor text = model.bank->text_embeddings_value(req.class_names, req.task);
    const RawOutputs raw = forward_values(model, image, req.class_names, req.task);
    std::vector<double> lambdas(req.class_names.size(), 0.0);
    for (size_t j = 0; j < lambdas.size(); ++j)
        if (req.treat_unseen[j]) lambdas[j] = req.ensemble_weight;
    const Tensor scores =
        classify_masks_per_class(model, raw.queries, text, raw.mask_probs, image, lambdas);

    TaskOutput out;
    out.task = req.task;
    out.parameter_hash = model.parameter_hash();
    switch (req.task) {
        case Task::Semantic: {
            IntMap local = semantic_inference(raw.mask_probs, scores);
            out.semantic = IntMap::filled(local.h, local.w, kBackgroundIndex);
            for (int64_t i = 0; i < static_cast<int64_t>(local.v.size()); ++i)
                out.semantic.v[static_cast<size_t>(i)] =
                    req.class_ids[static_cast<size_t>(local.v[static_cast<size_t>(i)])];
            break;
        }
        case Task::Instance:
            out.instances = instance_inference(raw.mask_probs, scores, req);
            break;
        case Task::Panoptic:
            out.panoptic = panoptic_inference(raw.mask_probs, scores, req);
            break;
    }
    return out;
}

double query_entropy(const std::vector<double>& probs) {
    double e = 0.0;
    for (double p : probs)
        if (p > 0.0) e -= p * std::log(p);
    if (!std::isfinite(e)) throw NumericFault("ttpt: non-finite entropy");
    return e / static_cast<double>(probs.size());
}

std::vector<int> select_low_entropy_queries(const Tensor& unseen_probs, double tau) {
    std::vector<int> out;
    const int n = unseen_probs.dim(0), u = unseen_probs.dim(1);
    for (int q = 0; q < n; ++q) {
        std::vector<double> row(static_cast<size_t>(u));
        for (int j = 0; j < u; ++j) row[static_cast<size_t>(j)] = unseen_probs(q, j);
        if (query_entropy(row) < tau) out.push_back(q);
    }
    return out;
}

std::vector<TaskOutput> ttpt_run(train::Model& model, const std::vector<ImageF32>& images,
                                 const TaskRequest& req, TtptReport* report) {
    req.validate();
    if (!req.ttpt) throw ConfigError("ttpt_run: request carries no TTPT config");
    const TTPTConfig& tc = *req.ttpt;
    const auto unseen_cols = req.unseen_columns();
    const int n_u = static_cast<int>(unseen_cols.size());
    if (n_u == 0) throw ConfigError("ttpt_run: no unseen classes in the request");
    const double tau = tc.tau > 0.0 ? tc.tau : default_tau(n_u);

    auto tunable = model.bank->tunable_parameters(prompts::TuneScope::ClassOnly);
    std::vector<TaskOutput> outputs;
    TtptReport local_report;

    for (const auto& image : images) {
        std::vector<Tensor> snapshot;
        for (auto* p : tunable) snapshot.push_back(p->value);

        std::vector<int> selected;
        std::vector<double> traj;
        for (int step = 0; step < tc.steps && !tunable.empty(); ++step) {
            ad::Graph g;
            ad::Node* text = model.bank->text_embeddings(g, req.class_names, req.task);
            const auto fwd = model.net->forward(g, image, model.cfg.use_interaction ? text : nullptr);
            ad::Node* sim = g.matmul(g.l2_normalize_rows(fwd.queries), g.l2_normalize_rows(text),
                                     false, true);
            ad::Node* s_u = g.scale(g.gather_cols(sim, unseen_cols), 1.0 / model.cfg.temperature);
            if (step == 0) {
                // per-query probabilities over unseen classes (values only)
                ad::Graph gv;
                const Tensor& probs = gv.softmax_rows(gv.constant(s_u->val))->val;
                selected = select_low_entropy_queries(probs, tau);
                if (selected.empty()) break;
            }
            // L_ent over the selected queries (Eq. 11)
            ad::Node* rows = g.gather_rows(s_u, selected);
            ad::Node* p = g.softmax_rows(rows);
            ad::Node* lp = g.log_softmax_rows(rows);
            ad::Node* lent = g.scale(g.sum_all(g.mul(p, lp)),
                                     -1.0 / (static_cast<double>(n_u) *
                                             static_cast<double>(selected.size())));
            traj.push_back(lent->val[0]);
            for (auto* prm : tunable) prm->zero_grad();
            g.backward(lent);
            for (auto* prm : tunable)
                for (int64_t i = 0; i < prm->value.size(); ++i)
                    prm->value[i] -= tc.lr * prm->grad[i];
        }

        if (selected.empty()) ++local_report.skipped;
        if (!traj.empty()) local_report.ent_trajectories.push_back(traj);
        ++local_report.images;

        outputs.push_back(run_request(model, image, req));

        if (tc.episodic)
            for (size_t i = 0; i < tunable.size(); ++i) tunable[i]->value = snapshot[i];
    }
    if (report) *report = local_report;
    return outputs;
}

} // namespace freeseg::infer
