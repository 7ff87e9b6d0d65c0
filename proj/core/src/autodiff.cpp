#include "freeseg/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "freeseg/errors.hpp"

namespace freeseg {

Parameter& ParamStore::create(const std::string& name, Tensor init, bool frozen) {
    if (find(name)) throw ConfigError("duplicate parameter name: " + name);
    items_.push_back(Parameter{name, std::move(init), Tensor{}, frozen, Tensor{}, Tensor{}});
    return items_.back();
}

Parameter* ParamStore::find(const std::string& name) {
    for (auto& p : items_)
        if (p.name == name) return &p;
    return nullptr;
}

const Parameter* ParamStore::find(const std::string& name) const {
    for (const auto& p : items_)
        if (p.name == name) return &p;
    return nullptr;
}

Parameter& ParamStore::at(const std::string& name) {
    if (Parameter* p = find(name)) return *p;
    throw ConfigError("unknown parameter: " + name);
}

std::vector<Parameter*> ParamStore::all() {
    std::vector<Parameter*> out;
    for (auto& p : items_) out.push_back(&p);
    return out;
}

std::vector<Parameter*> ParamStore::trainable() {
    std::vector<Parameter*> out;
    for (auto& p : items_)
        if (!p.frozen) out.push_back(&p);
    return out;
}

std::vector<Parameter*> ParamStore::with_prefix(const std::string& prefix) {
    std::vector<Parameter*> out;
    for (auto& p : items_)
        if (p.name.rfind(prefix, 0) == 0) out.push_back(&p);
    return out;
}

void ParamStore::zero_grads() {
    for (auto& p : items_) p.zero_grad();
}

namespace ad {

Node* Graph::make(Tensor val, std::vector<Node*> in) {
    nodes_.push_back(Node{});
    Node& n = nodes_.back();
    n.val = std::move(val);
    n.in = std::move(in);
    n.id = static_cast<int>(nodes_.size()) - 1;
    for (Node* p : n.in)
        if (p->needs_grad) n.needs_grad = true;
    return &n;
}

Node* Graph::constant(Tensor v) { return make(std::move(v), {}); }

Node* Graph::leaf(Tensor v) {
    Node* n = make(std::move(v), {});
    n->needs_grad = true;
    return n;
}

Node* Graph::param(Parameter& p) {
    Node* n = make(p.value, {});
    n->needs_grad = true;
    n->sink = &p;
    return n;
}

namespace {

void require_same_shape(const Node* a, const Node* b, const char* op) {
    if (!a->val.same_shape(b->val))
        throw ConfigError(std::string(op) + ": shape mismatch " + a->val.shape_str() + " vs " +
                          b->val.shape_str());
}

// out (+)= op(A) * op(B)
void matmul_raw(const Tensor& A, bool ta, const Tensor& B, bool tb, Tensor& out, bool accumulate) {
    const int am = ta ? A.dim(1) : A.dim(0);
    const int ak = ta ? A.dim(0) : A.dim(1);
    const int bk = tb ? B.dim(1) : B.dim(0);
    const int bn = tb ? B.dim(0) : B.dim(1);
    if (ak != bk) throw ConfigError("matmul: inner dimension mismatch");
    if (!accumulate) out.fill(0.0);
    for (int i = 0; i < am; ++i) {
        for (int k = 0; k < ak; ++k) {
            const double a = ta ? A(k, i) : A(i, k);
            if (a == 0.0) continue;
            double* orow = out.data() + static_cast<size_t>(i) * bn;
            if (!tb) {
                const double* brow = B.data() + static_cast<size_t>(k) * bn;
                for (int j = 0; j < bn; ++j) orow[j] += a * brow[j];
            } else {
                for (int j = 0; j < bn; ++j) orow[j] += a * B(j, k);
            }
        }
    }
}

} // namespace

Node* Graph::add(Node* a, Node* b) {
    require_same_shape(a, b, "add");
    Tensor out = a->val;
    for (int64_t i = 0; i < out.size(); ++i) out[i] += b->val[i];
    Node* n = make(std::move(out), {a, b});
    n->back = [](Node& n) {
        for (int s = 0; s < 2; ++s) {
            Node* in = n.in[s];
            if (!in->needs_grad) continue;
            in->ensure_grad();
            for (int64_t i = 0; i < n.grad.size(); ++i) in->grad[i] += n.grad[i];
        }
    };
    return n;
}

Node* Graph::sub(Node* a, Node* b) {
    require_same_shape(a, b, "sub");
    Tensor out = a->val;
    for (int64_t i = 0; i < out.size(); ++i) out[i] -= b->val[i];
    Node* n = make(std::move(out), {a, b});
    n->back = [](Node& n) {
        if (n.in[0]->needs_grad) {
            n.in[0]->ensure_grad();
            for (int64_t i = 0; i < n.grad.size(); ++i) n.in[0]->grad[i] += n.grad[i];
        }
        if (n.in[1]->needs_grad) {
            n.in[1]->ensure_grad();
            for (int64_t i = 0; i < n.grad.size(); ++i) n.in[1]->grad[i] -= n.grad[i];
        }
    };
    return n;
}

Node* Graph::mul(Node* a, Node* b) {
    require_same_shape(a, b, "mul");
    Tensor out = a->val;
    for (int64_t i = 0; i < out.size(); ++i) out[i] *= b->val[i];
    Node* n = make(std::move(out), {a, b});
    n->back = [](Node& n) {
        Node *a = n.in[0], *b = n.in[1];
        if (a->needs_grad) {
            a->ensure_grad();
            for (int64_t i = 0; i < n.grad.size(); ++i) a->grad[i] += n.grad[i] * b->val[i];
        }
        if (b->needs_grad) {
            b->ensure_grad();
            for (int64_t i = 0; i < n.grad.size(); ++i) b->grad[i] += n.grad[i] * a->val[i];
        }
    };
    return n;
}

Node* Graph::scale(Node* a, double c) {
    Tensor out = a->val;
    for (int64_t i = 0; i < out.size(); ++i) out[i] *= c;
    Node* n = make(std::move(out), {a});
    n->back = [c](Node& n) {
        Node* a = n.in[0];
        if (!a->needs_grad) return;
        a->ensure_grad();
        for (int64_t i = 0; i < n.grad.size(); ++i) a->grad[i] += c * n.grad[i];
    };
    return n;
}

Node* Graph::add_const(Node* a, double c) {
    Tensor out = a->val;
    for (int64_t i = 0; i < out.size(); ++i) out[i] += c;
    Node* n = make(std::move(out), {a});
    n->back = [](Node& n) {
        Node* a = n.in[0];
        if (!a->needs_grad) return;
        a->ensure_grad();
        for (int64_t i = 0; i < n.grad.size(); ++i) a->grad[i] += n.grad[i];
    };
    return n;
}

Node* Graph::relu(Node* a) {
    Tensor out = a->val;
    for (int64_t i = 0; i < out.size(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
    Node* n = make(std::move(out), {a});
    n->back = [](Node& n) {
        Node* a = n.in[0];
        if (!a->needs_grad) return;
        a->ensure_grad();
        for (int64_t i = 0; i < n.grad.size(); ++i)
            if (a->val[i] > 0.0) a->grad[i] += n.grad[i];
    };
    return n;
}

Node* Graph::tanh_(Node* a) {
    Tensor out = a->val;
    for (int64_t i = 0; i < out.size(); ++i) out[i] = std::tanh(out[i]);
    Node* n = make(std::move(out), {a});
    n->back = [](Node& n) {
        Node* a = n.in[0];
        if (!a->needs_grad) return;
        a->ensure_grad();
        for (int64_t i = 0; i < n.grad.size(); ++i) {
            const double y = n.val[i];
            a->grad[i] += n.grad[i] * (1.0 - y * y);
        }
    };
    return n;
}

Node* Graph::sigmoid(Node* a) {
    Tensor out = a->val;
    for (int64_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-out[i]));
    Node* n = make(std::move(out), {a});
    n->back = [](Node& n) {
        Node* a = n.in[0];
        if (!a->needs_grad) return;
        a->ensure_grad();
        for (int64_t i = 0; i < n.grad.size(); ++i) {
            const double y = n.val[i];
            a->grad[i] += n.grad[i] * y * (1.0 - y);
        }
    };
    return n;
}

Node* Graph::matmul(Node* a, Node* b, bool ta, bool tb) {
    if (a->val.rank() != 2 || b->val.rank() != 2) throw ConfigError("matmul: rank-2 operands required");
    const int m = ta ? a->val.dim(1) : a->val.dim(0);
    const int nn = tb ? b->val.dim(0) : b->val.dim(1);
    Tensor out({m, nn});
    matmul_raw(a->val, ta, b->val, tb, out, false);
    Node* n = make(std::move(out), {a, b});
    n->back = [ta, tb](Node& n) {
        Node *a = n.in[0], *b = n.in[1];
        if (a->needs_grad) {
            a->ensure_grad();
            if (!ta && !tb) matmul_raw(n.grad, false, b->val, true, a->grad, true);
            else if (ta && !tb) matmul_raw(b->val, false, n.grad, true, a->grad, true);
            else if (!ta && tb) matmul_raw(n.grad, false, b->val, false, a->grad, true);
            else matmul_raw(b->val, true, n.grad, true, a->grad, true);
        }
        if (b->needs_grad) {
            b->ensure_grad();
            if (!ta && !tb) matmul_raw(a->val, true, n.grad, false, b->grad, true);
            else if (ta && !tb) matmul_raw(a->val, false, n.grad, false, b->grad, true);
            else if (!ta && tb) matmul_raw(n.grad, true, a->val, false, b->grad, true);
            else matmul_raw(n.grad, true, a->val, true, b->grad, true);
        }
    };
    return n;
}

Node* Graph::transpose(Node* a) {
    if (a->val.rank() != 2) throw ConfigError("transpose: rank-2 required");
    const int r = a->val.dim(0), c = a->val.dim(1);
    Tensor out({c, r});
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out(j, i) = a->val(i, j);
    Node* n = make(std::move(out), {a});
    n->back = [r, c](Node& n) {
        Node* a = n.in[0];
        if (!a->needs_grad) return;
        a->ensure_grad();
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) a->grad(i, j) += n.grad(j, i);
    };
    return n;
}

Node* Graph::add_rowvec(Node* mat, Node* v) {
    if (mat->val.rank() != 2 || mat->val.dim(1) != static_cast<int>(v->val.size()))
        throw ConfigError("add_rowvec: width mismatch");
    const int r = mat->val.dim(0), c = mat->val.dim(1);
    Tensor out = mat->val;
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out(i, j) += v->val[j];
    Node* n = make(std::move(out), {mat, v});
    n->back = [r, c](Node& n) {
        Node *mat = n.in[0], *v = n.in[1];
        if (mat->needs_grad) {
            mat->ensure_grad();
            for (int64_t i = 0; i < n.grad.size(); ++i) mat->grad[i] += n.grad[i];
        }
        if (v->needs_grad) {
            v->ensure_grad();
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j) v->grad[j] += n.grad(i, j);
        }
    };
    return n;
}

Node* Graph::softmax_rows(Node* a) {
    if (a->val.rank() != 2) throw ConfigError("softmax_rows: rank-2 required");
    const int r = a->val.dim(0), c = a->val.dim(1);
    Tensor out = a->val;
    for (int i = 0; i < r; ++i) {
        double mx = out(i, 0);
        for (int j = 1; j < c; ++j) mx = std::max(mx, out(i, j));
        double s = 0.0;
        for (int j = 0; j < c; ++j) {
            out(i, j) = std::exp(out(i, j) - mx);
            s += out(i, j);
        }
        for (int j = 0; j < c; ++j) out(i, j) /= s;
    }
    Node* n = make(std::move(out), {a});
    n->back = [r, c](Node& n) {
        Node* a = n.in[0];
        if (!a->needs_grad) return;
        a->ensure_grad();
        for (int i = 0; i < r; ++i) {
            double dot = 0.0;
            for (int j = 0; j < c; ++j) dot += n.grad(i, j) * n.val(i, j);
            for (int j = 0; j < c; ++j) a->grad(i, j) += n.val(i, j) * (n.grad(i, j) - dot);
        }
    };
    return n;
}

Node* Graph::log_softmax_rows(Node* a) {
    if (a->val.rank() != 2) throw ConfigError("log_softmax_rows: rank-2 required");
    const int r = a->val.dim(0), c = a->val.dim(1);
    Tensor out = a->val;
    for (int i = 0; i < r; ++i) {
        double mx = out(i, 0);
        for (int j = 1; j < c; ++j) mx = std::max(mx, out(i, j));
        double s = 0.0;
        for (int j = 0; j < c; ++j) s += std::exp(out(i, j) - mx);
        const double lse = mx + std::log(s);
        for (int j = 0; j < c; ++j) out(i, j) -= lse;
    }
    Node* n = make(std::move(out), {a});
    n->back = [r, c](Node& n) {
        Node* a = n.in[0];
        if (!a->needs_grad) return;
        a->ensure_grad();
        for (int i = 0; i < r; ++i) {
            double gsum = 0.0;
            for (int j = 0; j < c; ++j) gsum += n.grad(i, j);
            for (int j = 0; j < c; ++j)
                a->grad(i, j) += n.grad(i, j) - std::exp(n.val(i, j)) * gsum;
        }
    };
    return n;
}

Node* Graph::l2_normalize_rows(Node* a) {
    const bool vector_input = a->val.rank() == 1;
    const int r = vector_input ? 1 : a->val.dim(0);
    const int c = vector_input ? static_cast<int>(a->val.size()) : a->val.dim(1);
    Tensor out = a->val;
    std::vector<double> norms(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) {
        double s = 0.0;
        double* row = out.data() + static_cast<size_t>(i) * c;
        for (int j = 0; j < c; ++j) s += row[j] * row[j];
        const double nrm = std::sqrt(s);
        if (!(nrm > 1e-30))
            throw NumericFault("l2_normalize: zero-norm row " + std::to_string(i));
        norms[static_cast<size_t>(i)] = nrm;
        for (int j = 0; j < c; ++j) row[j] /= nrm;
    }
    Node* n = make(std::move(out), {a});
    n->back = [r, c, norms](Node& n) {
        Node* a = n.in[0];
        if (!a->needs_grad) return;
        a->ensure_grad();
        for (int i = 0; i < r; ++i) {
            const double* y = n.val.data() + static_cast<size_t>(i) * c;
            const double* g = n.grad.data() + static_cast<size_t>(i) * c;
            double* ga = a->grad.data() + static_cast<size_t>(i) * c;
            double dot = 0.0;
            for (int j = 0; j < c; ++j) dot += g[j] * y[j];
            const double inv = 1.0 / norms[static_cast<size_t>(i)];
            for (int j = 0; j < c; ++j) ga[j] += (g[j] - dot * y[j]) * inv;
        }
    };
    return n;
}

Node* Graph::layernorm_rows(Node* a, Node* gamma, Node* beta, double eps) {
    if (a->val.rank() != 2) throw ConfigError("layernorm_rows: rank-2 required");
    const int r = a->val.dim(0), c = a->val.dim(1);
    if (static_cast<int>(gamma->val.size()) != c || static_cast<int>(beta->val.size()) != c)
        throw ConfigError("layernorm_rows: affine width mismatch");
    Tensor out({r, c});
    Tensor xhat({r, c});
    std::vector<double> inv_std(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) {
        double mu = 0.0;
        for (int j = 0; j < c; ++j) mu += a->val(i, j);
        mu /= c;
        double var = 0.0;
        for (int j = 0; j < c; ++j) {
            const double d = a->val(i, j) - mu;
            var += d * d;
        }
        var /= c;
        const double istd = 1.0 / std::sqrt(var + eps);
        inv_std[static_cast<size_t>(i)] = istd;
        for (int j = 0; j < c; ++j) {
            xhat(i, j) = (a->val(i, j) - mu) * istd;
            out(i, j) = xhat(i, j) * gamma->val[j] + beta->val[j];
        }
    }
    Node* n = make(std::move(out), {a, gamma, beta});
    n->back = [r, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& n) {
        Node *a = n.in[0], *gamma = n.in[1], *beta = n.in[2];
        if (gamma->needs_grad) {
            gamma->ensure_grad();
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j) gamma->grad[j] += n.grad(i, j) * xhat(i, j);
        }
        if (beta->needs_grad) {
            beta->ensure_grad();
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j) beta->grad[j] += n.grad(i, j);
        }
        if (a->needs_grad) {
            a->ensure_grad();
            for (int i = 0; i < r; ++i) {
                double m1 = 0.0, m2 = 0.0;
                for (int j = 0; j < c; ++j) {
                    const double gx = n.grad(i, j) * gamma->val[j];
                    m1 += gx;
                    m2 += gx * xhat(i, j);
                }
                m1 /= c;
                m2 /= c;
                for (int j = 0; j < c; ++j) {
                    const double gx = n.grad(i, j) * gamma->val[j];
                    a->grad(i, j) += (gx - m1 - xhat(i, j) * m2) * inv_std[static_cast<size_t>(i)];
                }
            }
        }
    };
    return n;
}

Node* Graph::mean_rows(Node* a) {
    if (a->val.rank() != 2) throw ConfigError("mean_rows: rank-2 required");
    const int r = a->val.dim(0), c = a->val.dim(1);
    Tensor out({c});
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out[j] += a->val(i, j) / r;
    Node* n = make(std::move(out), {a});
    n->back = [r, c](Node& n) {
        Node* a = n.in[0];
        if (!a->needs_grad) return;
        a->ensure_grad();
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) a->grad(i, j) += n.grad[j] / r;
    };
    return n;
}

Node* Graph::reshape(Node* a, std::vector<int> shape) {
    if (Tensor::count(shape) != a->val.size()) throw ConfigError("reshape: element count mismatch");
    Tensor out = a->val;
    Tensor reshaped = Tensor::from(shape, std::vector<double>(out.data(), out.data() + out.size()));
    Node* n = make(std::move(reshaped), {a});
    n->back = [](Node& n) {
        Node* a = n.in[0];
        if (!a->needs_grad) return;
        a->ensure_grad();
        for (int64_t i = 0; i < n.grad.size(); ++i) a->grad[i] += n.grad[i];
    };
    return n;
}

Node* Graph::concat_cols(Node* a, Node* b) {
    if (a->val.rank() != 2 || b->val.rank() != 2 || a->val.dim(0) != b->val.dim(0))
        throw ConfigError("concat_cols: row mismatch " + a->val.shape_str() + " vs " + b->val.shape_str());
    const int r = a->val.dim(0), ca = a->val.dim(1), cb = b->val.dim(1);
    Tensor out({r, ca + cb});
    for (int i = 0; i < r; ++i) {
        for (int j = 0; j < ca; ++j) out(i, j) = a->val(i, j);
        for (int j = 0; j < cb; ++j) out(i, ca + j) = b->val(i, j);
    }
    Node* n = make(std::move(out), {a, b});
    n->back = [r, ca, cb](Node& n) {
        Node *a = n.in[0], *b = n.in[1];
        if (a->needs_grad) {
            a->ensure_grad();
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < ca; ++j) a->grad(i, j) += n.grad(i, j);
        }
        if (b->needs_grad) {
            b->ensure_grad();
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < cb; ++j) b->grad(i, j) += n.grad(i, ca + j);
        }
    };
    return n;
}

Node* Graph::slice_cols(Node* a, int c0, int c1) {
    if (a->val.rank() != 2 || c0 < 0 || c1 > a->val.dim(1) || c0 >= c1)
        throw ConfigError("slice_cols: bad range");
    const int r = a->val.dim(0), c = c1 - c0;
    Tensor out({r, c});
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out(i, j) = a->val(i, c0 + j);
    Node* n = make(std::move(out), {a});
    n->back = [r, c, c0](Node& n) {
        Node* a = n.in[0];
        if (!a->needs_grad) return;
        a->ensure_grad();
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) a->grad(i, c0 + j) += n.grad(i, j);
    };
    return n;
}

Node* Graph::gather_cols(Node* a, std::vector<int> idx) {
    if (a->val.rank() != 2) throw ConfigError("gather_cols: rank-2 required");
    const int r = a->val.dim(0), c = static_cast<int>(idx.size());
    for (int j : idx)
        if (j < 0 || j >= a->val.dim(1)) throw ConfigError("gather_cols: index out of range");
    Tensor out({r, c});
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out(i, j) = a->val(i, idx[static_cast<size_t>(j)]);
    Node* n = make(std::move(out), {a});
    n->back = [r, c, idx = std::move(idx)](Node& n) {
        Node* a = n.in[0];
        if (!a->needs_grad) return;
        a->ensure_grad();
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) a->grad(i, idx[static_cast<size_t>(j)]) += n.grad(i, j);
    };
    return n;
}

Node* Graph::gather_rows(Node* a, std::vector<int> idx) {
    if (a->val.rank() != 2) throw ConfigError("gather_rows: rank-2 required");
    const int c = a->val.dim(1), r = static_cast<int>(idx.size());
    for (int i : idx)
        if (i < 0 || i >= a->val.dim(0)) throw ConfigError("gather_rows: index out of range");
    Tensor out({r, c});
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out(i, j) = a->val(idx[static_cast<size_t>(i)], j);
    Node* n = make(std::move(out), {a});
    n->back = [r, c, idx = std::move(idx)](Node& n) {
        Node* a = n.in[0];
        if (!a->needs_grad) return;
        a->ensure_grad();
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) a->grad(idx[static_cast<size_t>(i)], j) += n.grad(i, j);
    };
    return n;
}

Node* Graph::stack_rows(const std::vector<Node*>& rows) {
    if (rows.empty()) throw ConfigError("stack_rows: empty input");
    const int c = static_cast<int>(rows[0]->val.size());
    const int r = static_cast<int>(rows.size());
    Tensor out({r, c});
    for (int i = 0; i < r; ++i) {
        if (static_cast<int>(rows[static_cast<size_t>(i)]->val.size()) != c)
            throw ConfigError("stack_rows: width mismatch");
        for (int j = 0; j < c; ++j) out(i, j) = rows[static_cast<size_t>(i)]->val[j];
    }
    Node* n = make(std::move(out), std::vector<Node*>(rows));
    n->back = [r, c](Node& n) {
        for (int i = 0; i < r; ++i) {
            Node* in = n.in[static_cast<size_t>(i)];
            if (!in->needs_grad) continue;
            in->ensure_grad();
            for (int j = 0; j < c; ++j) in->grad[j] += n.grad(i, j);
        }
    };
    return n;
}

Node* Graph::chw_to_tokens(Node* a) {
    if (a->val.rank() != 3) throw ConfigError("chw_to_tokens: rank-3 required");
    const int c = a->val.dim(0), h = a->val.dim(1), w = a->val.dim(2);
    Tensor out({h * w, c});
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) out(y * w + x, ch) = a->val(ch, y, x);
    Node* n = make(std::move(out), {a});
    n->back = [c, h, w](Node& n) {
        Node* a = n.in[0];
        if (!a->needs_grad) return;
        a->ensure_grad();
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) a->grad(ch, y, x) += n.grad(y * w + x, ch);
    };
    return n;
}

Node* Graph::tokens_to_chw(Node* a, int h, int w) {
    if (a->val.rank() != 2 || a->val.dim(0) != h * w)
        throw ConfigError("tokens_to_chw: token count mismatch");
    const int c = a->val.dim(1);
    Tensor out({c, h, w});
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) out(ch, y, x) = a->val(y * w + x, ch);
    Node* n = make(std::move(out), {a});
    n->back = [c, h, w](Node& n) {
        Node* a = n.in[0];
        if (!a->needs_grad) return;
        a->ensure_grad();
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) a->grad(y * w + x, ch) += n.grad(ch, y, x);
    };
    return n;
}

Node* Graph::select_channel(Node* a, int c) {
    if (a->val.rank() != 3 || c < 0 || c >= a->val.dim(0))
        throw ConfigError("select_channel: bad channel");
    const int h = a->val.dim(1), w = a->val.dim(2);
    Tensor out({h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) out(y, x) = a->val(c, y, x);
    Node* n = make(std::move(out), {a});
    n->back = [c, h, w](Node& n) {
        Node* a = n.in[0];
        if (!a->needs_grad) return;
        a->ensure_grad();
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) a->grad(c, y, x) += n.grad(y, x);
    };
    return n;
}

Node* Graph::conv2d(Node* x, Node* w, Node* b, int stride, int pad) {
    if (x->val.rank() != 3 || w->val.rank() != 4) throw ConfigError("conv2d: bad ranks");
    const int ci = x->val.dim(0), h = x->val.dim(1), ww = x->val.dim(2);
    const int co = w->val.dim(0), k = w->val.dim(2);
    if (w->val.dim(1) != ci || w->val.dim(3) != k) throw ConfigError("conv2d: weight shape mismatch");
    if (static_cast<int>(b->val.size()) != co) throw ConfigError("conv2d: bias shape mismatch");
    const int oh = (h + 2 * pad - k) / stride + 1;
    const int ow = (ww + 2 * pad - k) / stride + 1;
    Tensor out({co, oh, ow});
    for (int oc = 0; oc < co; ++oc) {
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                double acc = b->val[oc];
                for (int ic = 0; ic < ci; ++ic) {
                    for (int ky = 0; ky < k; ++ky) {
                        const int iy = oy * stride + ky - pad;
                        if (iy < 0 || iy >= h) continue;
                        for (int kx = 0; kx < k; ++kx) {
                            const int ix = ox * stride + kx - pad;
                            if (ix < 0 || ix >= ww) continue;
                            acc += w->val(oc, ic, ky, kx) * x->val(ic, iy, ix);
                        }
                    }
                }
                out(oc, oy, ox) = acc;
            }
        }
    }
    Node* n = make(std::move(out), {x, w, b});
    n->back = [ci, h, ww, co, k, stride, pad](Node& n) {
        Node *x = n.in[0], *w = n.in[1], *b = n.in[2];
        const int oh = n.val.dim(1), ow = n.val.dim(2);
        const bool gx = x->needs_grad, gw = w->needs_grad, gb = b->needs_grad;
        if (gx) x->ensure_grad();
        if (gw) w->ensure_grad();
        if (gb) b->ensure_grad();
        for (int oc = 0; oc < co; ++oc) {
            for (int oy = 0; oy < oh; ++oy) {
                for (int ox = 0; ox < ow; ++ox) {
                    const double g = n.grad(oc, oy, ox);
                    if (g == 0.0) continue;
                    if (gb) b->grad[oc] += g;
                    for (int ic = 0; ic < ci; ++ic) {
                        for (int ky = 0; ky < k; ++ky) {
                            const int iy = oy * stride + ky - pad;
                            if (iy < 0 || iy >= h) continue;
                            for (int kx = 0; kx < k; ++kx) {
                                const int ix = ox * stride + kx - pad;
                                if (ix < 0 || ix >= ww) continue;
                                if (gw) w->grad(oc, ic, ky, kx) += g * x->val(ic, iy, ix);
                                if (gx) x->grad(ic, iy, ix) += g * w->val(oc, ic, ky, kx);
                            }
                        }
                    }
                }
            }
        }
    };
    return n;
}

Node* Graph::upsample_bilinear(Node* x, int out_h, int out_w) {
    if (x->val.rank() != 3) throw ConfigError("upsample_bilinear: rank-3 required");
    const int c = x->val.dim(0), h = x->val.dim(1), w = x->val.dim(2);
    const double sy = static_cast<double>(h) / out_h;
    const double sx = static_cast<double>(w) / out_w;
    // precompute interpolation taps (align_corners=false convention)
    struct Tap {
        int i0, i1;
        double w0, w1;
    };
    std::vector<Tap> ty(static_cast<size_t>(out_h)), tx(static_cast<size_t>(out_w));
    auto make_tap = [](int o, double s, int n) {
        double src = (o + 0.5) * s - 0.5;
        src = std::max(0.0, std::min(src, static_cast<double>(n - 1)));
        const int i0 = static_cast<int>(std::floor(src));
        const int i1 = std::min(i0 + 1, n - 1);
        const double f = src - i0;
        return Tap{i0, i1, 1.0 - f, f};
    };
    for (int oy = 0; oy < out_h; ++oy) ty[static_cast<size_t>(oy)] = make_tap(oy, sy, h);
    for (int ox = 0; ox < out_w; ++ox) tx[static_cast<size_t>(ox)] = make_tap(ox, sx, w);
    Tensor out({c, out_h, out_w});
    for (int ch = 0; ch < c; ++ch)
        for (int oy = 0; oy < out_h; ++oy) {
            const Tap& a = ty[static_cast<size_t>(oy)];
            for (int ox = 0; ox < out_w; ++ox) {
                const Tap& bx = tx[static_cast<size_t>(ox)];
                out(ch, oy, ox) = a.w0 * (bx.w0 * x->val(ch, a.i0, bx.i0) + bx.w1 * x->val(ch, a.i0, bx.i1)) +
                                  a.w1 * (bx.w0 * x->val(ch, a.i1, bx.i0) + bx.w1 * x->val(ch, a.i1, bx.i1));
            }
        }
    Node* n = make(std::move(out), {x});
    n->back = [c, out_h, out_w, ty = std::move(ty), tx = std::move(tx)](Node& n) {
        Node* x = n.in[0];
        if (!x->needs_grad) return;
        x->ensure_grad();
        for (int ch = 0; ch < c; ++ch)
            for (int oy = 0; oy < out_h; ++oy) {
                const Tap& a = ty[static_cast<size_t>(oy)];
                for (int ox = 0; ox < out_w; ++ox) {
                    const Tap& bx = tx[static_cast<size_t>(ox)];
                    const double g = n.grad(ch, oy, ox);
                    if (g == 0.0) continue;
                    x->grad(ch, a.i0, bx.i0) += g * a.w0 * bx.w0;
                    x->grad(ch, a.i0, bx.i1) += g * a.w0 * bx.w1;
                    x->grad(ch, a.i1, bx.i0) += g * a.w1 * bx.w0;
                    x->grad(ch, a.i1, bx.i1) += g * a.w1 * bx.w1;
                }
            }
    };
    return n;
}

Node* Graph::sum_all(Node* a) {
    Tensor out({1});
    out[0] = a->val.sum();
    Node* n = make(std::move(out), {a});
    n->back = [](Node& n) {
        Node* a = n.in[0];
        if (!a->needs_grad) return;
        a->ensure_grad();
        const double g = n.grad[0];
        for (int64_t i = 0; i < a->grad.size(); ++i) a->grad[i] += g;
    };
    return n;
}

Node* Graph::mean_all(Node* a) {
    Tensor out({1});
    const double inv = 1.0 / static_cast<double>(a->val.size());
    out[0] = a->val.sum() * inv;
    Node* n = make(std::move(out), {a});
    n->back = [inv](Node& n) {
        Node* a = n.in[0];
        if (!a->needs_grad) return;
        a->ensure_grad();
        const double g = n.grad[0] * inv;
        for (int64_t i = 0; i < a->grad.size(); ++i) a->grad[i] += g;
    };
    return n;
}

namespace {

struct FocalTerms {
    double loss, dldz;
};

// Per-element focal loss and its derivative w.r.t. the logit.
// p_t is the sigmoid probability of the true label; the log argument is
// clamped at kLogProbFloor.
inline FocalTerms focal_element(double z, double t, double gamma, double alpha) {
    const double p = 1.0 / (1.0 + std::exp(-z));
    const double pt = t > 0.5 ? p : 1.0 - p;
    const double at = t > 0.5 ? alpha : 1.0 - alpha;
    const double lpt = std::log(std::max(pt, kLogProbFloor));
    const double one_m = 1.0 - pt;
    const double loss = -at * std::pow(one_m, gamma) * lpt;
    // dL/dz = s * a_t * (1-p_t)^gamma * (gamma * p_t * ln p_t - (1 - p_t)),
    // s = +1 for t=1 and -1 for t=0.
    const double s = t > 0.5 ? 1.0 : -1.0;
    const double dldz = s * at * std::pow(one_m, gamma) * (gamma * pt * lpt - one_m);
    return {loss, dldz};
}

} // namespace

double focal_loss_value(const Tensor& logits, const Tensor& target, double gamma, double alpha) {
    if (!logits.same_shape(target)) throw ConfigError("focal_loss: shape mismatch");
    double s = 0.0;
    for (int64_t i = 0; i < logits.size(); ++i)
        s += focal_element(logits[i], target[i], gamma, alpha).loss;
    return s / static_cast<double>(logits.size());
}

double dice_loss_value(const Tensor& logits, const Tensor& target, double eps) {
    if (!logits.same_shape(target)) throw ConfigError("dice_loss: shape mismatch");
    double inter = 0.0, psum = 0.0, gsum = 0.0;
    for (int64_t i = 0; i < logits.size(); ++i) {
        const double p = 1.0 / (1.0 + std::exp(-logits[i]));
        inter += p * target[i];
        psum += p;
        gsum += target[i];
    }
    return 1.0 - (2.0 * inter + eps) / (psum + gsum + eps);
}

Node* Graph::sigmoid_focal_loss(Node* logits, const Tensor& target, double gamma, double alpha) {
    if (!logits->val.same_shape(target)) throw ConfigError("sigmoid_focal_loss: shape mismatch");
    Tensor out({1});
    const int64_t n_el = logits->val.size();
    for (int64_t i = 0; i < n_el; ++i)
        out[0] += focal_element(logits->val[i], target[i], gamma, alpha).loss;
    out[0] /= static_cast<double>(n_el);
    Node* n = make(std::move(out), {logits});
    n->back = [target, gamma, alpha, n_el](Node& n) {
        Node* a = n.in[0];
        if (!a->needs_grad) return;
        a->ensure_grad();
        const double g = n.grad[0] / static_cast<double>(n_el);
        for (int64_t i = 0; i < n_el; ++i)
            a->grad[i] += g * focal_element(a->val[i], target[i], gamma, alpha).dldz;
    };
    return n;
}

Node* Graph::dice_loss(Node* logits, const Tensor& target, double eps) {
    if (!logits->val.same_shape(target)) throw ConfigError("dice_loss: shape mismatch");
    const int64_t n_el = logits->val.size();
    double inter = 0.0, psum = 0.0, gsum = 0.0;
    std::vector<double> probs(static_cast<size_t>(n_el));
    for (int64_t i = 0; i < n_el; ++i) {
        const double p = 1.0 / (1.0 + std::exp(-logits->val[i]));
        probs[static_cast<size_t>(i)] = p;
        inter += p * target[i];
        psum += p;
        gsum += target[i];
    }
    const double denom = psum + gsum + eps;
    Tensor out({1});
    out[0] = 1.0 - (2.0 * inter + eps) / denom;
    Node* n = make(std::move(out), {logits});
    n->back = [target, inter, denom, eps, probs = std::move(probs)](Node& n) {
        Node* a = n.in[0];
        if (!a->needs_grad) return;
        a->ensure_grad();
        const double g = n.grad[0];
        const double num = 2.0 * inter + eps;
        for (int64_t i = 0; i < a->val.size(); ++i) {
            const double p = probs[static_cast<size_t>(i)];
            // d/dp_i of -(2I+eps)/(P+G+eps)
            const double dldp = -(2.0 * target[i] * denom - num) / (denom * denom);
            a->grad[i] += g * dldp * p * (1.0 - p);
        }
    };
    return n;
}

Node* Graph::ce_rows(Node* logits, const std::vector<int>& targets,
                     const std::vector<double>& weights, double normalizer) {
    if (logits->val.rank() != 2) throw ConfigError("ce_rows: rank-2 required");
    const int r = logits->val.dim(0), c = logits->val.dim(1);
    if (static_cast<int>(targets.size()) != r || static_cast<int>(weights.size()) != r)
        throw ConfigError("ce_rows: target/weight count mismatch");
    for (int t : targets)
        if (t < 0 || t >= c) throw ConfigError("ce_rows: target out of range");
    Tensor lsm = logits->val;
    for (int i = 0; i < r; ++i) {
        double mx = lsm(i, 0);
        for (int j = 1; j < c; ++j) mx = std::max(mx, lsm(i, j));
        double s = 0.0;
        for (int j = 0; j < c; ++j) s += std::exp(lsm(i, j) - mx);
        const double lse = mx + std::log(s);
        for (int j = 0; j < c; ++j) lsm(i, j) -= lse;
    }
    Tensor out({1});
    for (int i = 0; i < r; ++i)
        out[0] -= weights[static_cast<size_t>(i)] * lsm(i, targets[static_cast<size_t>(i)]);
    out[0] /= normalizer;
    Node* n = make(std::move(out), {logits});
    n->back = [r, c, targets, weights, normalizer, lsm = std::move(lsm)](Node& n) {
        Node* a = n.in[0];
        if (!a->needs_grad) return;
        a->ensure_grad();
        const double g = n.grad[0] / normalizer;
        for (int i = 0; i < r; ++i) {
            const double wi = weights[static_cast<size_t>(i)];
            if (wi == 0.0) continue;
            const int t = targets[static_cast<size_t>(i)];
            for (int j = 0; j < c; ++j) {
                const double soft = std::exp(lsm(i, j));
                a->grad(i, j) += g * wi * (soft - (j == t ? 1.0 : 0.0));
            }
        }
    };
    return n;
}

Node* Graph::check_finite(Node* a, const std::string& where) {
    if (!a->val.all_finite()) throw NumericFault("non-finite activations in " + where);
    return a;
}

void Graph::backward(Node* loss) {
    if (loss->val.size() != 1) throw ConfigError("backward: loss must be scalar");
    // mark reachable subgraph
    std::vector<bool> reach(nodes_.size(), false);
    std::vector<Node*> stack{loss};
    reach[static_cast<size_t>(loss->id)] = true;
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        for (Node* p : n->in) {
            if (p->needs_grad && !reach[static_cast<size_t>(p->id)]) {
                reach[static_cast<size_t>(p->id)] = true;
                stack.push_back(p);
            }
        }
    }
    for (auto& n : nodes_) {
        if (reach[static_cast<size_t>(n.id)]) {
            n.ensure_grad();
            n.grad.fill(0.0);
        }
    }
    loss->grad[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        if (!reach[static_cast<size_t>(it->id)] || !it->back) continue;
        it->back(*it);
    }
    // flush leaf gradients into bound parameters
    for (auto& n : nodes_) {
        if (n.sink && reach[static_cast<size_t>(n.id)]) {
            if (!n.sink->grad.same_shape(n.sink->value)) n.sink->zero_grad();
            for (int64_t i = 0; i < n.grad.size(); ++i) n.sink->grad[i] += n.grad[i];
        }
    }
}

} // namespace ad

void AdamW::step(const std::vector<Parameter*>& params) {
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (Parameter* p : params) {
        if (p->frozen) continue;
        if (!p->grad.same_shape(p->value)) p->zero_grad();
        if (!p->m.same_shape(p->value)) {
            p->m = Tensor(p->value.shape());
            p->v = Tensor(p->value.shape());
        }
        for (int64_t i = 0; i < p->value.size(); ++i) {
            const double g = p->grad[i];
            p->m[i] = beta1 * p->m[i] + (1.0 - beta1) * g;
            p->v[i] = beta2 * p->v[i] + (1.0 - beta2) * g * g;
            const double mhat = p->m[i] / bc1;
            const double vhat = p->v[i] / bc2;
            p->value[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * p->value[i]);
        }
    }
}

double clip_grad_norm(const std::vector<Parameter*>& params, double max_norm) {
    double sq = 0.0;
    for (Parameter* p : params) {
        if (p->frozen || !p->grad.same_shape(p->value)) continue;
        for (int64_t i = 0; i < p->grad.size(); ++i) sq += p->grad[i] * p->grad[i];
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double s = max_norm / (norm + 1e-12);
        for (Parameter* p : params) {
            if (p->frozen || !p->grad.same_shape(p->value)) continue;
            for (int64_t i = 0; i < p->grad.size(); ++i) p->grad[i] *= s;
        }
    }
    return norm;
}

} // namespace freeseg
