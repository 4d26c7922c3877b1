#pragma once

// Minimal reverse-mode autodiff over row-major Eigen matrices.
//
// A Graph records nodes in creation order; backward() walks them in reverse.
// Ops are coarse (fused attention, fused cross-entropy, routed top-k softmax)
// so a transformer step is a few hundred nodes. Gradients of parameter leaves
// are accumulated into Parameter::grad.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "mmgen/attnmask.hpp"
#include "mmgen/rope2d.hpp"

namespace mmgen::ag {

template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class ParamGroup { Transformer, VitProjector };

template <class T>
struct Parameter {
    std::string name;
    Matrix<T> value;
    Matrix<T> grad;
    ParamGroup group = ParamGroup::Transformer;
    bool trainable = true;

    void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// One packed sequence inside an attention call.
struct AttentionBlock {
    int offset = 0;
    int length = 0;
    std::shared_ptr<const AttentionMask> mask;
};

struct AttentionLayout {
    int heads = 1;
    int head_dim = 1;
    std::vector<AttentionBlock> blocks;
};

template <class T>
class Graph {
public:
    using Mat = Matrix<T>;

    explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) { nodes_.reserve(512); }

    bool grad_enabled() const { return grad_enabled_; }
    std::size_t size() const { return nodes_.size(); }

    Var constant(Mat value) { return push(std::move(value), false); }

    Var param(Parameter<T>& p) {
        const bool req = grad_enabled_ && p.trainable;
        Var v = push(p.value, req);
        if (req) leaves_.push_back({v.id, &p});
        return v;
    }

    const Mat& value(Var v) const { return node(v).value; }
    bool requires_grad(Var v) const { return node(v).requires_grad; }
    T scalar(Var v) const { return node(v).value(0, 0); }

    // Accumulated gradient of a node (zero-initialized on first use).
    Mat& grad(Var v) {
        auto& n = node(v);
        if (n.grad.size() == 0) n.grad.setZero(n.value.rows(), n.value.cols());
        return n.grad;
    }

    void backward(Var loss) {
        if (!grad_enabled_) throw std::logic_error("autograd: backward on a no-grad graph");
        const auto& l = node(loss);
        if (l.value.rows() != 1 || l.value.cols() != 1) throw std::invalid_argument("autograd: loss must be 1x1");
        if (!l.requires_grad) return;
        grad(loss)(0, 0) += T(1);
        for (int i = loss.id; i >= 0; --i) {
            auto& n = nodes_[static_cast<std::size_t>(i)];
            if (n.backward && n.grad.size() != 0) n.backward();
        }
        for (auto& [id, p] : leaves_) {
            auto& n = nodes_[static_cast<std::size_t>(id)];
            if (n.grad.size() == 0) continue;
            if (p->grad.size() == 0) p->zero_grad();
            p->grad += n.grad;
        }
    }

    // ---- linear algebra ---------------------------------------------------

    Var matmul(Var a, Var b) {
        check(value(a).cols() == value(b).rows(), "matmul shape mismatch");
        Mat out = value(a) * value(b);
        return record(std::move(out), {a, b}, [this, a, b](Var o) {
            if (requires_grad(a)) grad(a).noalias() += grad(o) * value(b).transpose();
            if (requires_grad(b)) grad(b).noalias() += value(a).transpose() * grad(o);
        });
    }

    // a * b^T
    Var matmul_bt(Var a, Var b) {
        check(value(a).cols() == value(b).cols(), "matmul_bt shape mismatch");
        Mat out = value(a) * value(b).transpose();
        return record(std::move(out), {a, b}, [this, a, b](Var o) {
            if (requires_grad(a)) grad(a).noalias() += grad(o) * value(b);
            if (requires_grad(b)) grad(b).noalias() += grad(o).transpose() * value(a);
        });
    }

    Var add(Var a, Var b) {
        check(value(a).rows() == value(b).rows() && value(a).cols() == value(b).cols(), "add shape mismatch");
        Mat out = value(a) + value(b);
        return record(std::move(out), {a, b}, [this, a, b](Var o) {
            if (requires_grad(a)) grad(a) += grad(o);
            if (requires_grad(b)) grad(b) += grad(o);
        });
    }

    // a + row (broadcast over rows)
    Var add_row(Var a, Var row) {
        check(value(row).rows() == 1 && value(row).cols() == value(a).cols(), "add_row shape mismatch");
        Mat out = value(a).rowwise() + value(row).row(0);
        return record(std::move(out), {a, row}, [this, a, row](Var o) {
            if (requires_grad(a)) grad(a) += grad(o);
            if (requires_grad(row)) grad(row) += grad(o).colwise().sum();
        });
    }

    // a * row elementwise (broadcast over rows)
    Var mul_row(Var a, Var row) {
        check(value(row).rows() == 1 && value(row).cols() == value(a).cols(), "mul_row shape mismatch");
        Mat out = value(a).array().rowwise() * value(row).row(0).array();
        return record(std::move(out), {a, row}, [this, a, row](Var o) {
            if (requires_grad(a)) grad(a).array() += grad(o).array().rowwise() * value(row).row(0).array();
            if (requires_grad(row)) grad(row) += (grad(o).array() * value(a).array()).matrix().colwise().sum();
        });
    }

    Var add_constant(Var a, T c) {
        Mat out = value(a).array() + c;
        return record(std::move(out), {a}, [this, a](Var o) { grad(a) += grad(o); });
    }

    Var scale(Var a, T s) {
        Mat out = value(a) * s;
        return record(std::move(out), {a}, [this, a, s](Var o) { grad(a) += grad(o) * s; });
    }

    Var slice_cols(Var a, int begin, int count) {
        check(begin >= 0 && count >= 0 && begin + count <= value(a).cols(), "slice_cols out of range");
        Mat out = value(a).middleCols(begin, count);
        return record(std::move(out), {a},
                      [this, a, begin, count](Var o) { grad(a).middleCols(begin, count) += grad(o); });
    }

    // ---- activations and normalization -------------------------------------

    Var silu(Var a) {
        const Mat& x = value(a);
        Mat sig = (T(1) + (-x.array()).exp()).inverse().matrix();
        Mat out = (x.array() * sig.array()).matrix();
        return record(std::move(out), {a}, [this, a, sig = std::move(sig)](Var o) {
            const auto& xv = value(a).array();
            grad(a).array() += grad(o).array() * (sig.array() * (T(1) + xv * (T(1) - sig.array())));
        });
    }

    Var gelu(Var a) {
        static constexpr T k = T(0.7978845608028654);  // sqrt(2/pi)
        static constexpr T c = T(0.044715);
        const Mat& x = value(a);
        Mat th = (k * (x.array() + c * x.array().cube())).tanh().matrix();
        Mat out = (T(0.5) * x.array() * (T(1) + th.array())).matrix();
        return record(std::move(out), {a}, [this, a, th = std::move(th)](Var o) {
            const auto xv = value(a).array();
            const auto t = th.array();
            auto d = T(0.5) * (T(1) + t) + T(0.5) * xv * (T(1) - t.square()) * k * (T(1) + T(3) * c * xv.square());
            grad(a).array() += grad(o).array() * d;
        });
    }

    // y = x / sqrt(mean(x^2) + eps) * weight, row-wise.
    Var rms_norm(Var a, Var weight, T eps = T(1e-6)) {
        const Mat& x = value(a);
        check(value(weight).rows() == 1 && value(weight).cols() == x.cols(), "rms_norm weight shape");
        const auto cols = static_cast<T>(x.cols());
        Eigen::Matrix<T, Eigen::Dynamic, 1> inv = ((x.array().square().rowwise().sum() / cols) + eps).rsqrt();
        Mat xhat = x.array().colwise() * inv.array();
        Mat out = xhat.array().rowwise() * value(weight).row(0).array();
        return record(std::move(out), {a, weight},
                      [this, a, weight, inv = std::move(inv), xhat = std::move(xhat), cols](Var o) {
                          const Mat& g = grad(o);
                          if (requires_grad(weight))
                              grad(weight) += (g.array() * xhat.array()).matrix().colwise().sum();
                          if (requires_grad(a)) {
                              Mat gx = g.array().rowwise() * value(weight).row(0).array();
                              Eigen::Matrix<T, Eigen::Dynamic, 1> dot =
                                  (gx.array() * xhat.array()).rowwise().sum() / cols;
                              grad(a).array() +=
                                  (gx.array() - xhat.array().colwise() * dot.array()).colwise() * inv.array();
                          }
                      });
    }

    // ---- row routing ---------------------------------------------------------

    Var gather_rows(Var a, std::vector<int> rows) {
        const Mat& x = value(a);
        Mat out(static_cast<Eigen::Index>(rows.size()), x.cols());
        for (std::size_t r = 0; r < rows.size(); ++r) {
            check(rows[r] >= 0 && rows[r] < x.rows(), "gather_rows index out of range");
            out.row(static_cast<Eigen::Index>(r)) = x.row(rows[r]);
        }
        return record(std::move(out), {a}, [this, a, rows = std::move(rows)](Var o) {
            Mat& ga = grad(a);
            const Mat& g = grad(o);
            for (std::size_t r = 0; r < rows.size(); ++r) ga.row(rows[r]) += g.row(static_cast<Eigen::Index>(r));
        });
    }

    struct RowPart {
        Var value;
        std::vector<int> rows;
    };

    // out[rows[r]] += part[r] for every part; out is rows x cols.
    Var scatter_rows(int rows, int cols, std::vector<RowPart> parts) {
        Mat out = Mat::Zero(rows, cols);
        std::vector<Var> inputs;
        for (const auto& p : parts) {
            const Mat& v = value(p.value);
            check(v.cols() == cols && v.rows() == static_cast<Eigen::Index>(p.rows.size()), "scatter_rows shape");
            for (std::size_t r = 0; r < p.rows.size(); ++r) {
                check(p.rows[r] >= 0 && p.rows[r] < rows, "scatter_rows index out of range");
                out.row(p.rows[r]) += v.row(static_cast<Eigen::Index>(r));
            }
            inputs.push_back(p.value);
        }
        return record(std::move(out), inputs, [this, parts = std::move(parts)](Var o) {
            const Mat& g = grad(o);
            for (const auto& p : parts) {
                if (!requires_grad(p.value)) continue;
                Mat& gp = grad(p.value);
                for (std::size_t r = 0; r < p.rows.size(); ++r) gp.row(static_cast<Eigen::Index>(r)) += g.row(p.rows[r]);
            }
        });
    }

    // out.row(r) = a.row(r) * w(r, 0)
    Var scale_rows(Var a, Var w) {
        const Mat& x = value(a);
        check(value(w).rows() == x.rows() && value(w).cols() == 1, "scale_rows shape");
        Mat out = x.array().colwise() * value(w).col(0).array();
        return record(std::move(out), {a, w}, [this, a, w](Var o) {
            const Mat& g = grad(o);
            if (requires_grad(a)) grad(a).array() += g.array().colwise() * value(w).col(0).array();
            if (requires_grad(w)) grad(w).col(0) += (g.array() * value(a).array()).rowwise().sum().matrix();
        });
    }

    // m x 1 column of selected entries.
    Var gather_elements(Var a, std::vector<std::pair<int, int>> index) {
        const Mat& x = value(a);
        Mat out(static_cast<Eigen::Index>(index.size()), 1);
        for (std::size_t r = 0; r < index.size(); ++r) out(static_cast<Eigen::Index>(r), 0) = x(index[r].first, index[r].second);
        return record(std::move(out), {a}, [this, a, index = std::move(index)](Var o) {
            Mat& ga = grad(a);
            const Mat& g = grad(o);
            for (std::size_t r = 0; r < index.size(); ++r)
                ga(index[r].first, index[r].second) += g(static_cast<Eigen::Index>(r), 0);
        });
    }

    // Softmax over each row of logits, top-k selection (ties to the lower
    // index), selected probabilities renormalized to sum 1. Returns the n x k
    // weights; indices receives the selected expert ids. Gradient flows to
    // the selected logits only, since the renormalized weights are a softmax
    // over them.
    Var topk_softmax(Var logits, int k, Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>& indices,
                     Mat* probs_out = nullptr) {
        const Mat& l = value(logits);
        const int n = static_cast<int>(l.rows());
        const int e = static_cast<int>(l.cols());
        check(k >= 1 && k <= e, "top_k must be in [1, num_experts]");
        if (!l.allFinite()) throw std::domain_error("moe: non-finite gate logits");
        indices.resize(n, k);
        Mat w(n, k);
        Mat probs(n, e);
        std::vector<int> order(static_cast<std::size_t>(e));
        for (int r = 0; r < n; ++r) {
            const T mx = l.row(r).maxCoeff();
            probs.row(r) = (l.row(r).array() - mx).exp().matrix();
            probs.row(r) /= probs.row(r).sum();
            std::iota(order.begin(), order.end(), 0);
            std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int x, int y) {
                const T px = l(r, x), py = l(r, y);
                return px > py || (px == py && x < y);
            });
            T total = 0;
            for (int s = 0; s < k; ++s) {
                indices(r, s) = order[static_cast<std::size_t>(s)];
                total += probs(r, order[static_cast<std::size_t>(s)]);
            }
            for (int s = 0; s < k; ++s) w(r, s) = probs(r, indices(r, s)) / total;
        }
        if (probs_out) *probs_out = probs;
        auto idx = indices;
        return record(std::move(w), {logits}, [this, logits, idx = std::move(idx)](Var o) {
            const Mat& g = grad(o);
            const Mat& wv = value(o);
            Mat& gl = grad(logits);
            for (Eigen::Index r = 0; r < g.rows(); ++r) {
                const T dot = (g.row(r).array() * wv.row(r).array()).sum();
                for (Eigen::Index s = 0; s < g.cols(); ++s) gl(r, idx(r, s)) += wv(r, s) * (g(r, s) - dot);
            }
        });
    }

    // Switch-style load balance: E * sum_e fraction_e * mean_r softmax(logits)_re.
    Var switch_aux(Var logits, std::vector<T> fraction) {
        const Mat& l = value(logits);
        const auto n = l.rows();
        const auto e = l.cols();
        check(static_cast<Eigen::Index>(fraction.size()) == e, "switch_aux fraction size");
        Mat probs(n, e);
        for (Eigen::Index r = 0; r < n; ++r) {
            const T mx = l.row(r).maxCoeff();
            probs.row(r) = (l.row(r).array() - mx).exp().matrix();
            probs.row(r) /= probs.row(r).sum();
        }
        Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> f(fraction.data(), e);
        T value_sum = 0;
        if (n > 0) value_sum = static_cast<T>(e) * (probs.colwise().mean().array() * f.array()).sum();
        Mat out(1, 1);
        out(0, 0) = value_sum;
        return record(std::move(out), {logits}, [this, logits, probs = std::move(probs), fraction = std::move(fraction)](Var o) {
            const auto n2 = probs.rows();
            const auto e2 = probs.cols();
            if (n2 == 0) return;
            const T g = grad(o)(0, 0);
            Mat& gl = grad(logits);
            for (Eigen::Index r = 0; r < n2; ++r) {
                T dot = 0;
                for (Eigen::Index c = 0; c < e2; ++c) dot += probs(r, c) * fraction[static_cast<std::size_t>(c)];
                for (Eigen::Index c = 0; c < e2; ++c)
                    gl(r, c) += g * static_cast<T>(e2) / static_cast<T>(n2) * probs(r, c) *
                                (fraction[static_cast<std::size_t>(c)] - dot);
            }
        });
    }

    // ---- attention -----------------------------------------------------------

    Var rope(Var a, std::shared_ptr<const RotaryTables> tables) {
        Mat out = value(a);
        apply_rope(out, *tables);
        return record(std::move(out), {a}, [this, a, tables = std::move(tables)](Var o) {
            Mat g = grad(o);
            apply_rope(g, *tables, 0, /*inverse=*/true);
            grad(a) += g;
        });
    }

    // Scaled dot-product attention per packed block and head under each
    // block's boolean mask. q, k, v are rows x (heads * head_dim).
    Var attention(Var q, Var k, Var v, AttentionLayout layout) {
        const Mat& Q = value(q);
        const Mat& K = value(k);
        const Mat& V = value(v);
        const int hd = layout.head_dim;
        check(Q.cols() == layout.heads * hd && K.cols() == Q.cols() && V.cols() == Q.cols(), "attention width");
        check(K.rows() == Q.rows() && V.rows() == Q.rows(), "attention rows");
        const T scale = T(1) / std::sqrt(static_cast<T>(hd));
        Mat out = Mat::Zero(Q.rows(), Q.cols());
        auto probs = std::make_shared<std::vector<Mat>>();
        for (const auto& b : layout.blocks) {
            check(b.mask && b.mask->size() == b.length && b.offset + b.length <= Q.rows(), "attention block/mask");
            for (int h = 0; h < layout.heads; ++h) {
                Mat s = Q.block(b.offset, h * hd, b.length, hd) * K.block(b.offset, h * hd, b.length, hd).transpose();
                for (int i = 0; i < b.length; ++i) {
                    T mx = -std::numeric_limits<T>::infinity();
                    for (int j = 0; j < b.length; ++j) {
                        if (b.mask->allowed(i, j)) {
                            s(i, j) *= scale;
                            mx = std::max(mx, s(i, j));
                        }
                    }
                    T total = 0;
                    for (int j = 0; j < b.length; ++j) {
                        const T p = b.mask->allowed(i, j) ? std::exp(s(i, j) - mx) : T(0);
                        s(i, j) = p;
                        total += p;
                    }
                    s.row(i) /= total;
                }
                out.block(b.offset, h * hd, b.length, hd).noalias() = s * V.block(b.offset, h * hd, b.length, hd);
                if (grad_enabled_) probs->push_back(std::move(s));
            }
        }
        return record(std::move(out), {q, k, v}, [this, q, k, v, layout = std::move(layout), probs, scale](Var o) {
            const Mat& G = grad(o);
            const Mat& Qv = value(q);
            const Mat& Kv = value(k);
            const Mat& Vv = value(v);
            Mat& gq = grad(q);
            Mat& gk = grad(k);
            Mat& gv = grad(v);
            const int hd2 = layout.head_dim;
            std::size_t idx = 0;
            for (const auto& b : layout.blocks) {
                for (int h = 0; h < layout.heads; ++h, ++idx) {
                    const Mat& P = (*probs)[idx];
                    auto Gb = G.block(b.offset, h * hd2, b.length, hd2);
                    gv.block(b.offset, h * hd2, b.length, hd2).noalias() += P.transpose() * Gb;
                    Mat dP = Gb * Vv.block(b.offset, h * hd2, b.length, hd2).transpose();
                    Eigen::Matrix<T, Eigen::Dynamic, 1> rowdot = (dP.array() * P.array()).rowwise().sum();
                    Mat dS = (P.array() * (dP.array().colwise() - rowdot.array())).matrix() * scale;
                    gq.block(b.offset, h * hd2, b.length, hd2).noalias() += dS * Kv.block(b.offset, h * hd2, b.length, hd2);
                    gk.block(b.offset, h * hd2, b.length, hd2).noalias() +=
                        dS.transpose() * Qv.block(b.offset, h * hd2, b.length, hd2);
                }
            }
        });
    }

    // ---- losses ---------------------------------------------------------------

    // Mean next-token cross-entropy; logits rows align with targets.
    Var cross_entropy(Var logits, std::vector<int> targets) {
        const Mat& l = value(logits);
        check(l.rows() == static_cast<Eigen::Index>(targets.size()), "cross_entropy rows/targets");
        check(!targets.empty(), "cross_entropy needs at least one target");
        Mat soft(l.rows(), l.cols());
        T total = 0;
        for (Eigen::Index r = 0; r < l.rows(); ++r) {
            const int t = targets[static_cast<std::size_t>(r)];
            check(t >= 0 && t < l.cols(), "cross_entropy target out of range");
            const T mx = l.row(r).maxCoeff();
            soft.row(r) = (l.row(r).array() - mx).exp().matrix();
            const T z = soft.row(r).sum();
            soft.row(r) /= z;
            total += std::log(z) + mx - l(r, t);
        }
        Mat out(1, 1);
        out(0, 0) = total / static_cast<T>(l.rows());
        return record(std::move(out), {logits}, [this, logits, soft = std::move(soft), targets = std::move(targets)](Var o) {
            const T g = grad(o)(0, 0) / static_cast<T>(soft.rows());
            Mat& gl = grad(logits);
            gl += soft * g;
            for (std::size_t r = 0; r < targets.size(); ++r) gl(static_cast<Eigen::Index>(r), targets[r]) -= g;
        });
    }

    // Mean squared error against a constant target.
    Var mse(Var pred, Mat target) {
        const Mat& p = value(pred);
        check(p.rows() == target.rows() && p.cols() == target.cols() && p.size() > 0, "mse shape");
        Mat diff = p - target;
        Mat out(1, 1);
        out(0, 0) = diff.squaredNorm() / static_cast<T>(diff.size());
        return record(std::move(out), {pred}, [this, pred, diff = std::move(diff)](Var o) {
            grad(pred) += diff * (T(2) * grad(o)(0, 0) / static_cast<T>(diff.size()));
        });
    }

    // sum_i w_i * s_i over 1x1 nodes.
    Var weighted_sum(std::vector<std::pair<Var, T>> terms) {
        Mat out = Mat::Zero(1, 1);
        std::vector<Var> inputs;
        for (auto& [v, w] : terms) {
            check(value(v).size() == 1, "weighted_sum expects scalars");
            out(0, 0) += w * value(v)(0, 0);
            inputs.push_back(v);
        }
        return record(std::move(out), inputs, [this, terms = std::move(terms)](Var o) {
            for (auto& [v, w] : terms)
                if (requires_grad(v)) grad(v)(0, 0) += w * grad(o)(0, 0);
        });
    }

private:
    struct Node {
        Mat value;
        Mat grad;
        bool requires_grad = false;
        std::function<void()> backward;
    };

    static void check(bool ok, const char* what) {
        if (!ok) throw std::invalid_argument(std::string("autograd: ") + what);
    }

    Node& node(Var v) {
        if (v.id < 0 || v.id >= static_cast<int>(nodes_.size())) throw std::out_of_range("autograd: invalid var");
        return nodes_[static_cast<std::size_t>(v.id)];
    }
    const Node& node(Var v) const {
        if (v.id < 0 || v.id >= static_cast<int>(nodes_.size())) throw std::out_of_range("autograd: invalid var");
        return nodes_[static_cast<std::size_t>(v.id)];
    }

    Var push(Mat value, bool requires_grad) {
        nodes_.push_back(Node{std::move(value), Mat(), requires_grad, {}});
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    template <class Fn>
    Var record(Mat value, std::initializer_list<Var> inputs, Fn&& fn) {
        return record(std::move(value), std::vector<Var>(inputs), std::forward<Fn>(fn));
    }

    template <class Fn>
    Var record(Mat value, const std::vector<Var>& inputs, Fn&& fn) {
        bool req = false;
        if (grad_enabled_)
            for (Var in : inputs) req = req || requires_grad(in);
        Var out = push(std::move(value), req);
        if (req) nodes_.back().backward = [fn = std::forward<Fn>(fn), out]() mutable { fn(out); };
        return out;
    }

    bool grad_enabled_ = true;
    std::vector<Node> nodes_;
    std::vector<std::pair<int, Parameter<T>*>> leaves_;
};

}  // namespace mmgen::ag
