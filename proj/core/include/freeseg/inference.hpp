#pragma once

#include <optional>
#include <string>
#include <vector>

#include "freeseg/training.hpp"

namespace freeseg::infer {

using prompts::Task;

struct TTPTConfig {
    double tau = 0.0; // <= 0 resolves to default_tau(N_u) at run time
    int steps = 5;
    double lr = 1e-3;
    bool episodic = true;

    void validate() const;
};

// Half of the maximum per-query entropy under the 1/N_u scaling.
double default_tau(int n_unseen);

struct TaskRequest {
    Task task = Task::Semantic;
    std::vector<std::string> class_names;
    std::vector<int> class_ids;       // global ids aligned with class_names
    std::vector<bool> treat_unseen;   // per class: ensemble weight applies
    std::vector<bool> is_thing;       // per class
    double ensemble_weight = 0.5;     // lambda_e used on unseen columns
    int max_instances = 50;
    double instance_score_floor = 0.05;
    double panoptic_overlap_thresh = 0.8;
    std::optional<TTPTConfig> ttpt;

    // Standard request over the full vocabulary of `cats`; lambda_e applies
    // to unseen classes, 0 on seen.
    static TaskRequest over_vocabulary(const synth::CategorySet& cats, Task task);
    // Cross-dataset convention: every class treated as unseen.
    static TaskRequest all_unseen(const synth::CategorySet& cats, Task task);

    void validate() const;
    std::vector<int> unseen_columns() const;
};

struct PanSegment {
    int id = 0;
    int class_id = 0; // global id
    bool is_thing = true;
    double score = 0.0;
};

struct PanopticOutput {
    IntMap segment_map; // 0 = void
    std::vector<PanSegment> segments;

    void validate() const; // ids in map <-> segments bijection
    static PanopticOutput from_segments(const std::vector<synth::Segment>& segs,
                                        const synth::CategorySet& cats, int h, int w);
};

struct PredInstance {
    MaskU8 mask;
    int class_id = 0; // global id
    double score = 0.0;
};

// Raw per-image network outputs needed by the post-processing stages.
struct RawOutputs {
    Tensor queries;    // F_v (N, D)
    Tensor mask_probs; // sigmoid of upsampled logits (N, H, W)
};

RawOutputs forward_values(const train::Model& model, const ImageF32& image,
                          const std::vector<std::string>& class_names, Task task);

// Ensemble classification: query-similarity softmax blended with the frozen
// region-encoder softmax, exponent lambda per class; rows sum to 1.
Tensor classify_masks(const train::Model& model, const Tensor& queries, const Tensor& text_emb,
                      const Tensor& mask_probs, const ImageF32& image, double lambda_e);
Tensor classify_masks_per_class(const train::Model& model, const Tensor& queries,
                                const Tensor& text_emb, const Tensor& mask_probs,
                                const ImageF32& image, const std::vector<double>& lambda_per_class);

// pixel label = argmax_c sum_n scores[n,c] * mask_probs[n]; ties -> lowest
// class index. Returns LOCAL class indices (column positions).
IntMap semantic_inference(const Tensor& mask_probs, const Tensor& class_scores);

std::vector<PredInstance> instance_inference(const Tensor& mask_probs, const Tensor& class_scores,
                                             const TaskRequest& req);

PanopticOutput panoptic_inference(const Tensor& mask_probs, const Tensor& class_scores,
                                  const TaskRequest& req);

struct TaskOutput {
    Task task = Task::Semantic;
    IntMap semantic;                     // global ids, kBackgroundIndex never emitted
    std::vector<PredInstance> instances; // global ids
    PanopticOutput panoptic;
    uint64_t parameter_hash = 0; // hash of the checkpoint parameters used
};

TaskOutput run_request(const train::Model& model, const ImageF32& image, const TaskRequest& req);

struct TtptReport {
    int images = 0;
    int skipped = 0; // images where no query passed the entropy filter
    std::vector<std::vector<double>> ent_trajectories; // per adapted image, per step
};

// Entropy of one query's unseen-class distribution under Eq.-10 scaling.
double query_entropy(const std::vector<double>& probs);

// Selected query set for a given score matrix (rows = queries over unseen
// columns already softmaxed); exposed for the tau-monotonicity property.
std::vector<int> select_low_entropy_queries(const Tensor& unseen_probs, double tau);

// Test-time prompt tuning over a batch of images. Adapts only the class
// context; episodic mode restores the bank after each image. Outputs are
// produced with the adapted parameters.
std::vector<TaskOutput> ttpt_run(train::Model& model, const std::vector<ImageF32>& images,
                                 const TaskRequest& req, TtptReport* report = nullptr);

} // namespace freeseg::infer
