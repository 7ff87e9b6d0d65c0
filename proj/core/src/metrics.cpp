#include "freeseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "freeseg/errors.hpp"

namespace freeseg::metrics {

using nlohmann::json;

namespace {

void finalize_means(MetricReport& r, const synth::CategorySet& cats) {
    double seen_sum = 0, unseen_sum = 0, all_sum = 0;
    int seen_n = 0, unseen_n = 0;
    for (const auto& [cid, v] : r.per_class) {
        all_sum += v;
        if (cats.is_seen(cid)) {
            seen_sum += v;
            ++seen_n;
        } else {
            unseen_sum += v;
            ++unseen_n;
        }
    }
    r.seen_mean = seen_n ? seen_sum / seen_n : 0.0;
    r.unseen_mean = unseen_n ? unseen_sum / unseen_n : 0.0;
    r.overall = r.per_class.empty() ? 0.0 : all_sum / static_cast<double>(r.per_class.size());
    r.harmonic = hiou(r.seen_mean, r.unseen_mean);
}

} // namespace

json MetricReport::to_json(const synth::CategorySet& cats) const {
    json jc = json::object();
    for (const auto& [cid, v] : per_class) {
        json entry = {{"score", v},
                      {"seen", cats.is_seen(cid)},
                      {"stuff", cats.is_stuff_class(cid)}};
        auto it = counts.find(cid);
        if (it != counts.end())
            entry["counts"] = {{"tp", it->second[0]}, {"fp", it->second[1]}, {"fn", it->second[2]}};
        jc[cats.classes[static_cast<size_t>(cid)].name] = entry;
    }
    json skipped = json::array();
    for (int cid : skipped_classes) skipped.push_back(cats.classes[static_cast<size_t>(cid)].name);
    return json{{"task", task},       {"metric", metric},   {"per_class", jc},
                {"seen_mean", seen_mean}, {"unseen_mean", unseen_mean},
                {"harmonic", harmonic},   {"overall", overall}, {"skipped", skipped}};
}

std::string MetricReport::to_csv(const synth::CategorySet& cats) const {
    std::ostringstream os;
    os << "class,split,stuff," << metric << ",tp,fp,fn\n";
    for (const auto& [cid, v] : per_class) {
        os << cats.classes[static_cast<size_t>(cid)].name << ","
           << (cats.is_seen(cid) ? "seen" : "unseen") << ","
           << (cats.is_stuff_class(cid) ? "stuff" : "thing") << "," << v;
        auto it = counts.find(cid);
        if (it != counts.end())
            os << "," << it->second[0] << "," << it->second[1] << "," << it->second[2];
        else
            os << ",,,";
        os << "\n";
    }
    os << "seen_mean,,," << seen_mean << ",,,\n";
    os << "unseen_mean,,," << unseen_mean << ",,,\n";
    os << "harmonic,,," << harmonic << ",,,\n";
    os << "overall,,," << overall << ",,,\n";
    return os.str();
}

double hiou(double a, double b) {
    if (a <= 0.0 || b <= 0.0) return 0.0;
    return 2.0 * a * b / (a + b);
}

MetricReport miou(const std::vector<IntMap>& gt, const std::vector<IntMap>& pred,
                  const synth::CategorySet& cats) {
    if (gt.size() != pred.size()) throw DataError("miou: image count mismatch");
    const int n_cls = cats.size();
    // dataset-aggregated confusion matrix over non-background GT pixels
    std::vector<int64_t> conf(static_cast<size_t>(n_cls) * n_cls, 0);
    for (size_t i = 0; i < gt.size(); ++i) {
        const auto& g = gt[i];
        const auto& p = pred[i];
        if (g.h != p.h || g.w != p.w) throw DataError("miou: shape mismatch at image " + std::to_string(i));
        for (size_t px = 0; px < g.v.size(); ++px) {
            const int32_t gv = g.v[px];
            if (gv == kBackgroundIndex) continue;
            const int32_t pv = p.v[px];
            if (gv < 0 || gv >= n_cls || pv < 0 || pv >= n_cls)
                throw DataError("miou: class id out of range");
            ++conf[static_cast<size_t>(gv) * n_cls + pv];
        }
    }
    MetricReport r;
    r.metric = "iou";
    r.task = "semantic";
    for (int c = 0; c < n_cls; ++c) {
        int64_t inter = conf[static_cast<size_t>(c) * n_cls + c];
        int64_t row = 0, col = 0;
        for (int j = 0; j < n_cls; ++j) {
            row += conf[static_cast<size_t>(c) * n_cls + j];
            col += conf[static_cast<size_t>(j) * n_cls + c];
        }
        const int64_t uni = row + col - inter;
        if (row == 0 && col == 0) {
            r.skipped_classes.push_back(c);
            continue;
        }
        r.per_class[c] = uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
        r.counts[c] = {inter, col - inter, row - inter};
    }
    finalize_means(r, cats);
    return r;
}

double mask_iou(const MaskU8& a, const MaskU8& b) {
    if (a.h != b.h || a.w != b.w) throw DataError("mask_iou: shape mismatch");
    int64_t inter = 0, uni = 0;
    for (size_t i = 0; i < a.px.size(); ++i) {
        const bool av = a.px[i] != 0, bv = b.px[i] != 0;
        inter += (av && bv) ? 1 : 0;
        uni += (av || bv) ? 1 : 0;
    }
    return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

namespace {

// COCO 101-point interpolated AP from a score-sorted TP/FP sequence.
double average_precision_101(const std::vector<std::pair<double, bool>>& dets, int64_t n_gt) {
    if (n_gt == 0) return 0.0;
    std::vector<double> precision, recall;
    int64_t tp = 0, fp = 0;
    for (const auto& [score, is_tp] : dets) {
        (void)score;
        if (is_tp) ++tp;
        else ++fp;
        precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
        recall.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
    }
    double ap = 0.0;
    for (int k = 0; k <= 100; ++k) {
        const double r = k / 100.0;
        double p_best = 0.0;
        for (size_t i = 0; i < recall.size(); ++i)
            if (recall[i] >= r) p_best = std::max(p_best, precision[i]);
        ap += p_best / 101.0;
    }
    return ap;
}

} // namespace

InstanceEval mask_map(const std::vector<std::vector<synth::Instance>>& gt,
                      const std::vector<std::vector<infer::PredInstance>>& pred,
                      const synth::CategorySet& cats) {
    if (gt.size() != pred.size()) throw DataError("mask_map: image count mismatch");
    for (const auto& preds : pred)
        for (const auto& p : preds)
            for (uint8_t v : p.mask.px)
                if (v > 1) throw DataError("mask_map: non-binary mask");

    std::vector<double> thresholds;
    for (int t = 50; t <= 95; t += 5) thresholds.push_back(t / 100.0);

    struct Det {
        double score;
        size_t image;
        size_t index;
    };
    const int n_cls = cats.size();
    InstanceEval ev;
    ev.map.metric = "ap";
    ev.ap50.metric = "ap50";
    ev.ap75.metric = "ap75";
    ev.map.task = ev.ap50.task = ev.ap75.task = "instance";

    for (int c = 0; c < n_cls; ++c) {
        if (cats.is_stuff_class(c)) continue; // AP is a thing metric
        int64_t n_gt = 0;
        for (const auto& insts : gt)
            for (const auto& inst : insts)
                if (inst.class_id == c) ++n_gt;
        int64_t n_pred = 0;
        std::vector<Det> dets;
        for (size_t i = 0; i < pred.size(); ++i)
            for (size_t k = 0; k < pred[i].size(); ++k)
                if (pred[i][k].class_id == c) {
                    dets.push_back(Det{pred[i][k].score, i, k});
                    ++n_pred;
                }
        if (n_gt == 0 && n_pred == 0) {
            ev.map.skipped_classes.push_back(c);
            ev.ap50.skipped_classes.push_back(c);
            ev.ap75.skipped_classes.push_back(c);
            continue;
        }
        if (n_gt == 0) continue; // detections for classes without GT are not scored
        std::stable_sort(dets.begin(), dets.end(), [](const Det& a, const Det& b) {
            if (a.score != b.score) return a.score > b.score;
            if (a.image != b.image) return a.image < b.image;
            return a.index < b.index;
        });

        double ap_sum = 0.0;
        for (double t : thresholds) {
            // greedy best-IoU matching per image, each GT used once
            std::map<size_t, std::vector<bool>> gt_used;
            std::vector<std::pair<double, bool>> seq;
            for (const auto& d : dets) {
                const auto& gts = gt[d.image];
                auto& used = gt_used[d.image];
                if (used.empty()) used.assign(gts.size(), false);
                int best_gi = -1;
                double best_iou = 0.0;
                for (size_t gi = 0; gi < gts.size(); ++gi) {
                    if (gts[gi].class_id != c || used[gi]) continue;
                    const double iou = mask_iou(pred[d.image][d.index].mask, gts[gi].mask);
                    if (iou >= t && iou > best_iou) {
                        best_iou = iou;
                        best_gi = static_cast<int>(gi);
                    }
                }
                if (best_gi >= 0) {
                    used[static_cast<size_t>(best_gi)] = true;
                    seq.emplace_back(d.score, true);
                } else {
                    seq.emplace_back(d.score, false);
                }
            }
            const double ap = average_precision_101(seq, n_gt);
            ap_sum += ap;
            if (t == 0.50) ev.ap50.per_class[c] = ap;
            if (t == 0.75) ev.ap75.per_class[c] = ap;
        }
        ev.map.per_class[c] = ap_sum / static_cast<double>(thresholds.size());
    }
    finalize_means(ev.map, cats);
    finalize_means(ev.ap50, cats);
    finalize_means(ev.ap75, cats);
    return ev;
}

PanopticEval panoptic_quality(const std::vector<infer::PanopticOutput>& gt,
                              const std::vector<infer::PanopticOutput>& pred,
                              const synth::CategorySet& cats) {
    if (gt.size() != pred.size()) throw DataError("panoptic_quality: image count mismatch");
    const int n_cls = cats.size();
    std::vector<double> iou_sum(static_cast<size_t>(n_cls), 0.0);
    std::vector<int64_t> tp(static_cast<size_t>(n_cls), 0), fp(static_cast<size_t>(n_cls), 0),
        fn(static_cast<size_t>(n_cls), 0);
    std::vector<bool> present(static_cast<size_t>(n_cls), false);

    for (size_t i = 0; i < gt.size(); ++i) {
        const auto& g = gt[i];
        const auto& p = pred[i];
        g.validate();
        p.validate();
        if (g.segment_map.h != p.segment_map.h || g.segment_map.w != p.segment_map.w)
            throw DataError("panoptic_quality: canvas mismatch");
        const size_t n_px = g.segment_map.v.size();

        std::map<int, int64_t> g_area, p_area, p_void;
        std::map<std::pair<int, int>, int64_t> inter;
        for (size_t px = 0; px < n_px; ++px) {
            const int gs = g.segment_map.v[px];
            const int ps = p.segment_map.v[px];
            if (gs > 0) ++g_area[gs];
            if (ps > 0) ++p_area[ps];
            if (gs > 0 && ps > 0) ++inter[{gs, ps}];
            if (gs == 0 && ps > 0) ++p_void[ps];
        }
        std::map<int, int> g_class, p_class;
        for (const auto& s : g.segments) {
            g_class[s.id] = s.class_id;
            present[static_cast<size_t>(s.class_id)] = true;
        }
        for (const auto& s : p.segments) {
            p_class[s.id] = s.class_id;
            present[static_cast<size_t>(s.class_id)] = true;
        }

        std::set<int> g_matched, p_matched;
        for (const auto& [key, in] : inter) {
            const auto [gs, ps] = key;
            if (g_class.at(gs) != p_class.at(ps)) continue;
            // void pixels are removed from the union, per the panoptic protocol
            const double uni = static_cast<double>(g_area[gs] + p_area[ps] - in -
                                                   (p_void.count(ps) ? p_void[ps] : 0));
            const double iou = uni > 0 ? static_cast<double>(in) / uni : 0.0;
            if (iou > 0.5) {
                const int c = g_class.at(gs);
                ++tp[static_cast<size_t>(c)];
                iou_sum[static_cast<size_t>(c)] += iou;
                g_matched.insert(gs);
                p_matched.insert(ps);
            }
        }
        for (const auto& [gs, c] : g_class)
            if (!g_matched.count(gs)) ++fn[static_cast<size_t>(c)];
        for (const auto& [ps, c] : p_class) {
            if (p_matched.count(ps)) continue;
            // unmatched predictions mostly covering void are not penalized
            const int64_t v = p_void.count(ps) ? p_void[ps] : 0;
            if (2 * v > p_area[ps]) continue;
            ++fp[static_cast<size_t>(c)];
        }
    }

    PanopticEval ev;
    ev.pq.metric = "pq";
    ev.sq.metric = "sq";
    ev.rq.metric = "rq";
    ev.pq.task = ev.sq.task = ev.rq.task = "panoptic";
    for (int c = 0; c < n_cls; ++c) {
        if (!present[static_cast<size_t>(c)]) {
            ev.pq.skipped_classes.push_back(c);
            ev.sq.skipped_classes.push_back(c);
            ev.rq.skipped_classes.push_back(c);
            continue;
        }
        const double denom =
            static_cast<double>(tp[static_cast<size_t>(c)]) +
            0.5 * static_cast<double>(fp[static_cast<size_t>(c)]) +
            0.5 * static_cast<double>(fn[static_cast<size_t>(c)]);
        const double pq = denom > 0 ? iou_sum[static_cast<size_t>(c)] / denom : 0.0;
        const double sq = tp[static_cast<size_t>(c)] > 0
                              ? iou_sum[static_cast<size_t>(c)] / static_cast<double>(tp[static_cast<size_t>(c)])
                              : 0.0;
        const double rq = denom > 0 ? static_cast<double>(tp[static_cast<size_t>(c)]) / denom : 0.0;
        ev.pq.per_class[c] = pq;
        ev.sq.per_class[c] = sq;
        ev.rq.per_class[c] = rq;
        const std::array<int64_t, 3> cnt = {tp[static_cast<size_t>(c)], fp[static_cast<size_t>(c)],
                                            fn[static_cast<size_t>(c)]};
        ev.pq.counts[c] = cnt;
        ev.sq.counts[c] = cnt;
        ev.rq.counts[c] = cnt;
    }
    finalize_means(ev.pq, cats);
    finalize_means(ev.sq, cats);
    finalize_means(ev.rq, cats);
    return ev;
}

} // namespace freeseg::metrics
