#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "freeseg/inference.hpp"
#include "freeseg/synthdata.hpp"

namespace freeseg::metrics {

// Per-class scores with seen/unseen aggregation. Classes absent from both
// ground truth and prediction are skipped, not zero-counted; the background
// index is excluded everywhere.
struct MetricReport {
    std::string task;
    std::string metric;
    std::map<int, double> per_class;                  // global class id -> score in [0,1]
    std::map<int, std::array<int64_t, 3>> counts;     // TP, FP, FN where applicable
    std::vector<int> skipped_classes;
    double seen_mean = 0.0;
    double unseen_mean = 0.0;
    double harmonic = 0.0; // semantic only
    double overall = 0.0;

    nlohmann::json to_json(const synth::CategorySet& cats) const;
    std::string to_csv(const synth::CategorySet& cats) const;
};

MetricReport miou(const std::vector<IntMap>& gt, const std::vector<IntMap>& pred,
                  const synth::CategorySet& cats);

double hiou(double miou_seen, double miou_unseen);

struct InstanceEval {
    MetricReport map;  // averaged over IoU 0.50:0.05:0.95
    MetricReport ap50;
    MetricReport ap75;
};

InstanceEval mask_map(const std::vector<std::vector<synth::Instance>>& gt,
                      const std::vector<std::vector<infer::PredInstance>>& pred,
                      const synth::CategorySet& cats);

struct PanopticEval {
    MetricReport pq;
    MetricReport sq;
    MetricReport rq;
};

PanopticEval panoptic_quality(const std::vector<infer::PanopticOutput>& gt,
                              const std::vector<infer::PanopticOutput>& pred,
                              const synth::CategorySet& cats);

// Mask IoU helpers shared by the evaluators.
double mask_iou(const MaskU8& a, const MaskU8& b);

} // namespace freeseg::metrics
