#pragma once

#include <optional>
#include <string>
#include <vector>

#include "freeseg/autodiff.hpp"
#include "freeseg/conceptspace.hpp"

namespace freeseg::prompts {

enum class Task { Semantic, Instance, Panoptic };

const std::vector<Task>& all_tasks();
std::string task_name(Task t);                 // e.g. "semantic segmentation."
std::vector<std::string> task_name_words(Task t);
Task task_from_string(const std::string& s);   // "semantic" | "instance" | "panoptic"
std::string task_key(Task t);                  // short key for files/CLI

struct PromptBankConfig {
    int n_task_ctx = 4;  // learnable task-context rows (half before, half after the name)
    int n_class_ctx = 8; // learnable class-context rows
    int token_dim = 64;
    bool class_adaptive = true;
    bool task_adaptive = true;
    double init_std = 0.02;
    uint64_t seed = 77;
};

enum class TuneScope { ClassOnly, All };

// Task prompts P_t and class prompts P_c with learnable shared context, the
// fusion projection producing joint text embeddings F_t, and the training-only
// no-object embedding. In fixed mode the context slots hold frozen encodings
// of the literal template words ("a photo of {class}." / "for {task}.").
class PromptBank {
public:
    PromptBank(ParamStore& store, const concepts::ConceptEncoder& enc, const PromptBankConfig& cfg);

    const PromptBankConfig& config() const { return cfg_; }

    ad::Node* build_task_embedding(ad::Graph& g, Task t) const;                         // (1,D)
    ad::Node* build_class_embeddings(ad::Graph& g, const std::vector<std::string>& class_names) const; // (C,D)
    ad::Node* fuse(ad::Graph& g, ad::Node* class_emb, ad::Node* task_emb) const;        // (C,D)
    // E_c -> fuse(E_c, E_t): the full Eq. 4-6 composition
    ad::Node* text_embeddings(ad::Graph& g, const std::vector<std::string>& class_names, Task t) const;
    ad::Node* no_object_embedding(ad::Graph& g) const; // (1,D), unit norm

    // value-only variants (fresh throwaway graph inside)
    Tensor task_embedding_value(Task t) const;
    Tensor class_embeddings_value(const std::vector<std::string>& class_names) const;
    Tensor text_embeddings_value(const std::vector<std::string>& class_names, Task t) const;
    Tensor no_object_value() const;

    // Parameter views; mutating them mutates the bank (aliasing contract).
    // ClassOnly -> the class context (empty in fixed class mode);
    // All -> class + task context and the fusion projection.
    std::vector<Parameter*> tunable_parameters(TuneScope scope) const;

    Parameter& class_context() { return *class_ctx_; }
    Parameter& task_context() { return *task_ctx_; }
    Parameter& fusion_projection() { return *fusion_w_; }
    Parameter& no_object() { return *no_object_; }

private:
    std::vector<concepts::GraphToken> prompt_sequence(ad::Graph& g, Parameter& ctx, int n_pre,
                                                      bool adaptive,
                                                      const std::vector<std::string>& name_words) const;

    PromptBankConfig cfg_;
    const concepts::ConceptEncoder* enc_;
    Parameter* class_ctx_ = nullptr;
    Parameter* task_ctx_ = nullptr;
    Parameter* fusion_w_ = nullptr; // (D, 2D), [I | 0] at init
    Parameter* no_object_ = nullptr;
    int class_pre_ = 0; // context rows before the name
    int task_pre_ = 0;
};

} // namespace freeseg::prompts
