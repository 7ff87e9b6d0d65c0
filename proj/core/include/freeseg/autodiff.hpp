#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "freeseg/tensor.hpp"

namespace freeseg {

// A named learnable (or frozen) tensor. Gradients accumulate into `grad`;
// `m`/`v` are AdamW moments, allocated on first optimizer step and carried
// through checkpoints so interrupted training resumes bit-for-bit.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
    bool frozen = false;
    Tensor m, v; // empty until the optimizer touches this parameter

    void zero_grad() {
        if (!grad.same_shape(value)) grad = Tensor(value.shape());
        grad.fill(0.0);
    }
};

class ParamStore {
public:
    Parameter& create(const std::string& name, Tensor init, bool frozen = false);
    Parameter* find(const std::string& name);
    const Parameter* find(const std::string& name) const;
    Parameter& at(const std::string& name);

    std::vector<Parameter*> all();
    std::vector<Parameter*> trainable();
    std::vector<Parameter*> with_prefix(const std::string& prefix);

    void zero_grads();
    size_t count() const { return items_.size(); }

private:
    std::deque<Parameter> items_; // deque: stable addresses
};

namespace ad {

struct Node {
    Tensor val;
    Tensor grad;
    bool needs_grad = false;
    int id = -1;
    std::vector<Node*> in;
    std::function<void(Node&)> back; // pushes this->grad into inputs
    Parameter* sink = nullptr;       // leaf bound to a ParamStore entry

    void ensure_grad() {
        if (!grad.same_shape(val)) {
            grad = Tensor(val.shape());
        }
    }
};

// Tape-style reverse-mode autodiff over freeseg::Tensor. One Graph per
// forward pass; nodes die with the graph.
class Graph {
public:
    Node* constant(Tensor v);
    Node* leaf(Tensor v); // requires grad, not bound to a Parameter
    Node* param(Parameter& p);

    // elementwise
    Node* add(Node* a, Node* b);
    Node* sub(Node* a, Node* b);
    Node* mul(Node* a, Node* b);
    Node* scale(Node* a, double c);
    Node* add_const(Node* a, double c);
    Node* relu(Node* a);
    Node* tanh_(Node* a);
    Node* sigmoid(Node* a);

    // linear algebra (rank-2 operands)
    Node* matmul(Node* a, Node* b, bool ta = false, bool tb = false);
    Node* transpose(Node* a);
    Node* add_rowvec(Node* mat, Node* v);
    Node* softmax_rows(Node* a);
    Node* log_softmax_rows(Node* a);
    Node* l2_normalize_rows(Node* a); // rank-1 treated as a single row
    Node* layernorm_rows(Node* a, Node* gamma, Node* beta, double eps = 1e-5);
    Node* mean_rows(Node* a); // (R,C) -> (C)

    // shape plumbing
    Node* reshape(Node* a, std::vector<int> shape);
    Node* concat_cols(Node* a, Node* b);
    Node* slice_cols(Node* a, int c0, int c1);
    Node* gather_cols(Node* a, std::vector<int> idx);
    Node* gather_rows(Node* a, std::vector<int> idx);
    Node* stack_rows(const std::vector<Node*>& rows); // each (C) or (1,C)
    Node* chw_to_tokens(Node* a); // (C,H,W) -> (H*W, C)
    Node* tokens_to_chw(Node* a, int h, int w);
    Node* select_channel(Node* a, int c); // (C,H,W) -> (H,W)

    // vision
    Node* conv2d(Node* x, Node* w, Node* b, int stride, int pad);
    Node* upsample_bilinear(Node* x, int out_h, int out_w); // (C,H,W)

    // reductions / losses
    Node* sum_all(Node* a);  // -> scalar, shape {1}
    Node* mean_all(Node* a); // -> scalar
    Node* sigmoid_focal_loss(Node* logits, const Tensor& target, double gamma, double alpha);
    Node* dice_loss(Node* logits, const Tensor& target, double eps);
    // sum_i weights[i] * (-log_softmax(logits)[i, targets[i]]) / normalizer
    Node* ce_rows(Node* logits, const std::vector<int>& targets,
                  const std::vector<double>& weights, double normalizer);

    void backward(Node* loss);

    // Throws NumericFault naming `where` if the node holds non-finite values.
    Node* check_finite(Node* a, const std::string& where);

    size_t node_count() const { return nodes_.size(); }

private:
    Node* make(Tensor val, std::vector<Node*> in);

    std::deque<Node> nodes_;
};

// Plain (tape-free) kernels shared with no-grad paths such as the matching
// cost. Values agree exactly with the Graph ops above.
double focal_loss_value(const Tensor& logits, const Tensor& target, double gamma, double alpha);
double dice_loss_value(const Tensor& logits, const Tensor& target, double eps);

// Log-stability clamp applied inside focal/CE kernels: probabilities fed to
// log() are clamped to at least this value.
inline constexpr double kLogProbFloor = 1e-12;

} // namespace ad

// Decoupled-weight-decay Adam. Single-threaded, deterministic.
struct AdamW {
    double lr = 2e-4;
    double weight_decay = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int64_t t = 0;

    void step(const std::vector<Parameter*>& params);
};

// Global-norm gradient clip; returns the pre-clip norm. max_norm <= 0 disables.
double clip_grad_norm(const std::vector<Parameter*>& params, double max_norm);

} // namespace freeseg
