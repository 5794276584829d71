#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "textbin/random.hpp"
#include "textbin/tensor.hpp"

namespace textbin {

namespace detail {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

/// C[MxN] (+)= op(A) * op(B) on row-major buffers. op(A) is MxK, op(B) is KxN.
inline void gemm(const float* a, bool trans_a, const float* b, bool trans_b, float* c, std::size_t m, std::size_t n,
                 std::size_t k, bool accumulate) {
    using Map = Eigen::Map<const RowMat>;
    const auto M = static_cast<Eigen::Index>(m);
    const auto N = static_cast<Eigen::Index>(n);
    const auto K = static_cast<Eigen::Index>(k);
    Eigen::Map<RowMat> C(c, M, N);
    Map A(a, trans_a ? K : M, trans_a ? M : K);
    Map B(b, trans_b ? N : K, trans_b ? K : N);
    auto run = [&](const auto& lhs, const auto& rhs) {
        if (accumulate) {
            C.noalias() += lhs * rhs;
        } else {
            C.noalias() = lhs * rhs;
        }
    };
    if (!trans_a && !trans_b) run(A, B);
    else if (trans_a && !trans_b) run(A.transpose(), B);
    else if (!trans_a && trans_b) run(A, B.transpose());
    else run(A.transpose(), B.transpose());
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

inline void require_rank(const Tensor& a, std::size_t rank, const char* op) {
    if (a.rank() != rank) {
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                             shape_str(a.shape()));
    }
}

template <typename Fn>
Tensor unary(const Tensor& x, const char* op, Fn&& fn) {
    // fn(value) -> pair(output, local derivative)
    std::vector<float> out(x.numel());
    std::vector<float> deriv(x.numel());
    auto in = x.data();
    for (std::size_t i = 0; i < in.size(); ++i) {
        auto [y, dy] = fn(in[i]);
        out[i] = y;
        deriv[i] = dy;
    }
    return make_result(x.shape(), std::move(out), {&x}, op, [xn = x.node().get(), deriv = std::move(deriv)](Node& self) {
        std::vector<float> g(self.grad.size());
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * deriv[i];
        xn->accumulate(g);
    });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<float> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return detail::make_result(a.shape(), std::move(out), {&a, &b}, "add",
                               [an = a.node().get(), bn = b.node().get()](detail::Node& self) {
                                   if (an->requires_grad) an->accumulate(self.grad);
                                   if (bn->requires_grad) bn->accumulate(self.grad);
                               });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<float> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    return detail::make_result(a.shape(), std::move(out), {&a, &b}, "sub",
                               [an = a.node().get(), bn = b.node().get()](detail::Node& self) {
                                   if (an->requires_grad) an->accumulate(self.grad);
                                   if (bn->requires_grad) {
                                       std::vector<float> g(self.grad.size());
                                       for (std::size_t i = 0; i < g.size(); ++i) g[i] = -self.grad[i];
                                       bn->accumulate(g);
                                   }
                               });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<float> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return detail::make_result(a.shape(), std::move(out), {&a, &b}, "mul",
                               [an = a.node().get(), bn = b.node().get()](detail::Node& self) {
                                   const std::size_t n = self.grad.size();
                                   if (an->requires_grad) {
                                       std::vector<float> g(n);
                                       for (std::size_t i = 0; i < n; ++i) g[i] = self.grad[i] * bn->data[i];
                                       an->accumulate(g);
                                   }
                                   if (bn->requires_grad) {
                                       std::vector<float> g(n);
                                       for (std::size_t i = 0; i < n; ++i) g[i] = self.grad[i] * an->data[i];
                                       bn->accumulate(g);
                                   }
                               });
}

inline Tensor scale(const Tensor& x, float factor) {
    return detail::unary(x, "scale", [factor](float v) { return std::pair{v * factor, factor}; });
}

inline Tensor relu(const Tensor& x) {
    return detail::unary(x, "relu", [](float v) { return v > 0.0f ? std::pair{v, 1.0f} : std::pair{0.0f, 0.0f}; });
}

inline Tensor sigmoid(const Tensor& x) {
    return detail::unary(x, "sigmoid", [](float v) {
        const float s = 1.0f / (1.0f + std::exp(-v));
        return std::pair{s, s * (1.0f - s)};
    });
}

/// x * sigmoid(x).
inline Tensor silu(const Tensor& x) {
    return detail::unary(x, "silu", [](float v) {
        const float s = 1.0f / (1.0f + std::exp(-v));
        return std::pair{v * s, s * (1.0f + v * (1.0f - s))};
    });
}

/// tanh-approximated GELU.
inline Tensor gelu(const Tensor& x) {
    return detail::unary(x, "gelu", [](float v) {
        constexpr float c = 0.7978845608028654f;  // sqrt(2/pi)
        const float u = c * (v + 0.044715f * v * v * v);
        const float t = std::tanh(u);
        const float du = c * (1.0f + 3.0f * 0.044715f * v * v);
        return std::pair{0.5f * v * (1.0f + t), 0.5f * (1.0f + t) + 0.5f * v * (1.0f - t * t) * du};
    });
}

/// Forward value taken from `value`, gradient routed to `x` as identity.
inline Tensor straight_through(const Tensor& x, const Tensor& value) {
    detail::require_same_shape(x, value, "straight_through");
    std::vector<float> out(value.data().begin(), value.data().end());
    return detail::make_result(x.shape(), std::move(out), {&x}, "straight_through",
                               [xn = x.node().get()](detail::Node& self) { xn->accumulate(self.grad); });
}

// ---------------------------------------------------------------------------
// Reductions and losses

inline Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (float v : x.data()) acc += v;
    Tensor out = detail::make_result(Shape{1}, {static_cast<float>(acc)}, {&x}, "sum", [xn = x.node().get()](detail::Node& self) {
        xn->accumulate(std::vector<float>(xn->data.size(), self.grad[0]));
    });
    out.node()->extended = acc;
    return out;
}

/// sum(x^2) accumulated in double.
inline Tensor sum_squares(const Tensor& x) {
    double acc = 0.0;
    for (float v : x.data()) acc += double(v) * v;
    Tensor out = detail::make_result(Shape{1}, {static_cast<float>(acc)}, {&x}, "sum_squares", [xn = x.node().get()](detail::Node& self) {
        std::vector<float> g(xn->data.size());
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = 2.0f * xn->data[i] * self.grad[0];
        xn->accumulate(g);
    });
    out.node()->extended = acc;
    return out;
}

inline Tensor mean(const Tensor& x) {
    double acc = 0.0;
    for (float v : x.data()) acc += v;
    const double n = static_cast<double>(x.numel());
    Tensor out = detail::make_result(Shape{1}, {static_cast<float>(acc / n)}, {&x}, "mean",
                               [xn = x.node().get(), n](detail::Node& self) {
                                   const float g = static_cast<float>(self.grad[0] / n);
                                   xn->accumulate(std::vector<float>(xn->data.size(), g));
                               });
    out.node()->extended = acc / n;
    return out;
}

/// Scalar weighted sum of scalars; used to assemble composite losses.
inline Tensor weighted_sum(const std::vector<Tensor>& terms, const std::vector<float>& weights) {
    if (terms.size() != weights.size() || terms.empty()) throw DimensionError("weighted_sum: term/weight mismatch");
    float total = 0.0f;
    for (std::size_t i = 0; i < terms.size(); ++i) total += weights[i] * terms[i].item();
    Tensor out = Tensor::scalar(total);
    bool needs = false;
    for (const auto& t : terms) needs = needs || t.requires_grad();
    if (needs) {
        auto& node = *out.node();
        node.requires_grad = true;
        std::vector<detail::Node*> raw;
        for (const auto& t : terms) {
            node.parents.push_back(t.node());
            raw.push_back(t.node().get());
        }
        node.backward = [raw, weights](detail::Node& self) {
            for (std::size_t i = 0; i < raw.size(); ++i) {
                if (raw[i]->requires_grad) raw[i]->accumulate(std::vector<float>{weights[i] * self.grad[0]});
            }
        };
    }
    out.node()->op = "weighted_sum";
    return out;
}

/// mean(|a - b|); subgradient 0 where a == b.
inline Tensor l1_loss(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "l1_loss");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) acc += std::fabs(double(a.data()[i]) - double(b.data()[i]));
    const double n = static_cast<double>(a.numel());
    return detail::with_extended(detail::make_result(Shape{1}, {static_cast<float>(acc / n)}, {&a, &b}, "l1_loss",
                               [an = a.node().get(), bn = b.node().get(), n](detail::Node& self) {
                                   const float g = static_cast<float>(self.grad[0] / n);
                                   std::vector<float> ga(an->data.size());
                                   for (std::size_t i = 0; i < ga.size(); ++i) {
                                       const float d = an->data[i] - bn->data[i];
                                       ga[i] = d > 0.0f ? g : (d < 0.0f ? -g : 0.0f);
                                   }
                                   if (bn->requires_grad) {
                                       std::vector<float> gb(ga.size());
                                       for (std::size_t i = 0; i < gb.size(); ++i) gb[i] = -ga[i];
                                       bn->accumulate(gb);
                                   }
                                   if (an->requires_grad) an->accumulate(ga);
                               }), acc / n);
}

/// mean((a - b)^2).
inline Tensor mse_loss(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mse_loss");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        const double d = double(a.data()[i]) - double(b.data()[i]);
        acc += d * d;
    }
    const double n = static_cast<double>(a.numel());
    return detail::with_extended(detail::make_result(Shape{1}, {static_cast<float>(acc / n)}, {&a, &b}, "mse_loss",
                               [an = a.node().get(), bn = b.node().get(), n](detail::Node& self) {
                                   const float g = static_cast<float>(2.0 * self.grad[0] / n);
                                   std::vector<float> ga(an->data.size());
                                   for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = g * (an->data[i] - bn->data[i]);
                                   if (bn->requires_grad) {
                                       std::vector<float> gb(ga.size());
                                       for (std::size_t i = 0; i < gb.size(); ++i) gb[i] = -ga[i];
                                       bn->accumulate(gb);
                                   }
                                   if (an->requires_grad) an->accumulate(ga);
                               }), acc / n);
}

/// Mean of -log softmax(logits)[target] over rows where mask is set.
/// Rows with mask 0 receive exactly zero gradient.
inline Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::uint32_t> targets,
                                    std::span<const std::uint8_t> mask) {
    detail::require_rank(logits, 2, "softmax_cross_entropy");
    const std::size_t rows = logits.dim(0);
    const std::size_t vocab = logits.dim(1);
    if (targets.size() != rows || mask.size() != rows) {
        throw DimensionError("softmax_cross_entropy: targets/mask length must equal row count");
    }
    std::size_t active = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (!mask[r]) continue;
        if (targets[r] >= vocab) throw DomainError("softmax_cross_entropy: target out of range");
        ++active;
    }
    if (active == 0) throw DomainError("softmax_cross_entropy: empty mask, loss undefined");

    std::vector<float> probs(rows * vocab, 0.0f);
    double total = 0.0;
    auto in = logits.data();
    for (std::size_t r = 0; r < rows; ++r) {
        if (!mask[r]) continue;
        const float* row = in.data() + r * vocab;
        const float peak = *std::max_element(row, row + vocab);
        double denom = 0.0;
        for (std::size_t v = 0; v < vocab; ++v) denom += std::exp(double(row[v]) - peak);
        const double log_denom = std::log(denom) + peak;
        total += log_denom - row[targets[r]];
        for (std::size_t v = 0; v < vocab; ++v) probs[r * vocab + v] = static_cast<float>(std::exp(row[v] - log_denom));
    }
    const double count = static_cast<double>(active);
    std::vector<std::uint32_t> tgt(targets.begin(), targets.end());
    std::vector<std::uint8_t> msk(mask.begin(), mask.end());
    return detail::with_extended(detail::make_result(
        Shape{1}, {static_cast<float>(total / count)}, {&logits}, "softmax_cross_entropy",
        [ln = logits.node().get(), probs = std::move(probs), tgt = std::move(tgt), msk = std::move(msk), vocab,
         count](detail::Node& self) {
            const float g = static_cast<float>(self.grad[0] / count);
            std::vector<float> grad(probs.size(), 0.0f);
            for (std::size_t r = 0; r < msk.size(); ++r) {
                if (!msk[r]) continue;
                for (std::size_t v = 0; v < vocab; ++v) grad[r * vocab + v] = g * probs[r * vocab + v];
                grad[r * vocab + tgt[r]] -= g;
            }
            ln->accumulate(grad);
        }), total / count);
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
    }
    std::vector<float> out(x.data().begin(), x.data().end());
    return detail::make_result(std::move(shape), std::move(out), {&x}, "reshape",
                               [xn = x.node().get()](detail::Node& self) { xn->accumulate(self.grad); });
}

/// General axis permutation: out.shape[i] = x.shape[axes[i]].
inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
    const std::size_t rank = x.rank();
    if (axes.size() != rank) throw DimensionError("permute: axis count mismatch");
    std::vector<bool> used(rank, false);
    for (std::size_t a : axes) {
        if (a >= rank || used[a]) throw DimensionError("permute: invalid axes");
        used[a] = true;
    }
    Shape out_shape(rank);
    for (std::size_t i = 0; i < rank; ++i) out_shape[i] = x.dim(axes[i]);
    std::vector<std::size_t> in_strides(rank, 1);
    for (std::size_t i = rank - 1; i > 0; --i) in_strides[i - 1] = in_strides[i] * x.dim(i);
    // source offset for every destination element
    std::vector<std::size_t> source(x.numel());
    std::vector<std::size_t> idx(rank, 0);
    for (std::size_t flat = 0; flat < source.size(); ++flat) {
        std::size_t off = 0;
        for (std::size_t i = 0; i < rank; ++i) off += idx[i] * in_strides[axes[i]];
        source[flat] = off;
        for (std::size_t i = rank; i-- > 0;) {
            if (++idx[i] < out_shape[i]) break;
            idx[i] = 0;
        }
    }
    std::vector<float> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[source[i]];
    return detail::make_result(std::move(out_shape), std::move(out), {&x}, "permute",
                               [xn = x.node().get(), source = std::move(source)](detail::Node& self) {
                                   std::vector<float> g(source.size());
                                   for (std::size_t i = 0; i < source.size(); ++i) g[source[i]] = self.grad[i];
                                   xn->accumulate(g);
                               });
}

/// Per leading-axis sample, take the block from `b` where take_b is set,
/// otherwise from `a`. Gradients follow the chosen source.
inline Tensor select_samples(const Tensor& a, const Tensor& b, const std::vector<std::uint8_t>& take_b) {
    detail::require_same_shape(a, b, "select_samples");
    if (take_b.size() != a.dim(0)) throw DimensionError("select_samples: mask length must equal batch size");
    const std::size_t block = a.numel() / a.dim(0);
    std::vector<float> out(a.numel());
    for (std::size_t s = 0; s < take_b.size(); ++s) {
        const auto& src = take_b[s] ? b : a;
        std::copy_n(src.data().begin() + s * block, block, out.begin() + s * block);
    }
    return detail::make_result(a.shape(), std::move(out), {&a, &b}, "select_samples",
                               [an = a.node().get(), bn = b.node().get(), take_b, block](detail::Node& self) {
                                   std::vector<float> ga(self.grad.size(), 0.0f);
                                   std::vector<float> gb(self.grad.size(), 0.0f);
                                   for (std::size_t s = 0; s < take_b.size(); ++s) {
                                       auto& dst = take_b[s] ? gb : ga;
                                       std::copy_n(self.grad.begin() + s * block, block, dst.begin() + s * block);
                                   }
                                   if (an->requires_grad) an->accumulate(ga);
                                   if (bn->requires_grad) bn->accumulate(gb);
                               });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// a[MxK] * b[KxN].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_rank(a, 2, "matmul");
    detail::require_rank(b, 2, "matmul");
    if (a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<float> out(m * n);
    detail::gemm(a.data().data(), false, b.data().data(), false, out.data(), m, n, k, false);
    return detail::make_result(Shape{m, n}, std::move(out), {&a, &b}, "matmul",
                               [an = a.node().get(), bn = b.node().get(), m, n, k](detail::Node& self) {
                                   if (an->requires_grad) {
                                       std::vector<float> g(m * k);
                                       detail::gemm(self.grad.data(), false, bn->data.data(), true, g.data(), m, k, n, false);
                                       an->accumulate(g);
                                   }
                                   if (bn->requires_grad) {
                                       std::vector<float> g(k * n);
                                       detail::gemm(an->data.data(), true, self.grad.data(), false, g.data(), k, n, m, false);
                                       bn->accumulate(g);
                                   }
                               });
}

/// a[MxK] * b[NxK]^T.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    detail::require_rank(a, 2, "matmul_nt");
    detail::require_rank(b, 2, "matmul_nt");
    if (a.dim(1) != b.dim(1)) {
        throw DimensionError("matmul_nt: inner dimensions differ " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()) + "^T");
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    std::vector<float> out(m * n);
    detail::gemm(a.data().data(), false, b.data().data(), true, out.data(), m, n, k, false);
    return detail::make_result(Shape{m, n}, std::move(out), {&a, &b}, "matmul_nt",
                               [an = a.node().get(), bn = b.node().get(), m, n, k](detail::Node& self) {
                                   if (an->requires_grad) {
                                       std::vector<float> g(m * k);
                                       detail::gemm(self.grad.data(), false, bn->data.data(), false, g.data(), m, k, n, false);
                                       an->accumulate(g);
                                   }
                                   if (bn->requires_grad) {
                                       std::vector<float> g(n * k);
                                       detail::gemm(self.grad.data(), true, an->data.data(), false, g.data(), n, k, m, false);
                                       bn->accumulate(g);
                                   }
                               });
}

/// x[..., D] + bias[D] broadcast over every leading position.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
    detail::require_rank(bias, 1, "add_bias");
    const std::size_t d = bias.dim(0);
    if (x.shape().back() != d) throw DimensionError("add_bias: last axis must equal bias length");
    std::vector<float> out(x.data().begin(), x.data().end());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bias.data()[i % d];
    return detail::make_result(x.shape(), std::move(out), {&x, &bias}, "add_bias",
                               [xn = x.node().get(), bn = bias.node().get(), d](detail::Node& self) {
                                   if (xn->requires_grad) xn->accumulate(self.grad);
                                   if (bn->requires_grad) {
                                       std::vector<double> acc(d, 0.0);
                                       for (std::size_t i = 0; i < self.grad.size(); ++i) acc[i % d] += self.grad[i];
                                       std::vector<float> g(acc.begin(), acc.end());
                                       bn->accumulate(g);
                                   }
                               });
}

/// Row gather: out[i] = table[ids[i]].
inline Tensor embedding(const Tensor& table, std::span<const std::uint32_t> ids) {
    detail::require_rank(table, 2, "embedding");
    const std::size_t rows = table.dim(0), width = table.dim(1);
    for (auto id : ids) {
        if (id >= rows) throw DomainError("embedding: id " + std::to_string(id) + " outside table of " +
                                          std::to_string(rows) + " rows");
    }
    if (ids.empty()) throw DimensionError("embedding: empty id list");
    std::vector<float> out(ids.size() * width);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        std::copy_n(table.data().begin() + ids[i] * width, width, out.begin() + i * width);
    }
    std::vector<std::uint32_t> keep(ids.begin(), ids.end());
    return detail::make_result(Shape{ids.size(), width}, std::move(out), {&table}, "embedding",
                               [tn = table.node().get(), keep = std::move(keep), width](detail::Node& self) {
                                   auto g = tn->grad_buffer();
                                   for (std::size_t i = 0; i < keep.size(); ++i) {
                                       float* dst = g.data() + keep[i] * width;
                                       const float* src = self.grad.data() + i * width;
                                       for (std::size_t j = 0; j < width; ++j) dst[j] += src[j];
                                   }
                               });
}

// ---------------------------------------------------------------------------
// Normalization

/// Normalizes over the last axis, then applies gain and bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps = 1e-5f) {
    const std::size_t d = x.shape().back();
    if (d == 0) throw DimensionError("layer_norm: empty feature axis");
    if (gain.numel() != d || bias.numel() != d) throw DimensionError("layer_norm: gain/bias length mismatch");
    if (!(eps > 0.0f)) throw DomainError("layer_norm: eps must be positive");
    const std::size_t rows = x.numel() / d;
    std::vector<float> normalized(x.numel());
    std::vector<float> inv_std(rows);
    std::vector<float> out(x.numel());
    auto in = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const float* row = in.data() + r * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += row[j];
        mu /= double(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= double(d);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[r] = static_cast<float>(is);
        for (std::size_t j = 0; j < d; ++j) {
            const float n = static_cast<float>((row[j] - mu) * is);
            normalized[r * d + j] = n;
            out[r * d + j] = n * gain.data()[j] + bias.data()[j];
        }
    }
    return detail::make_result(
        x.shape(), std::move(out), {&x, &gain, &bias}, "layer_norm",
        [xn = x.node().get(), gn = gain.node().get(), bn = bias.node().get(), normalized = std::move(normalized),
         inv_std = std::move(inv_std), d, rows](detail::Node& self) {
            const auto& g = self.grad;
            if (gn->requires_grad || bn->requires_grad) {
                std::vector<double> dg(d, 0.0), db(d, 0.0);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    dg[i % d] += double(g[i]) * normalized[i];
                    db[i % d] += g[i];
                }
                if (gn->requires_grad) gn->accumulate(std::vector<float>(dg.begin(), dg.end()));
                if (bn->requires_grad) bn->accumulate(std::vector<float>(db.begin(), db.end()));
            }
            if (xn->requires_grad) {
                std::vector<float> dx(g.size());
                for (std::size_t r = 0; r < rows; ++r) {
                    double mean_dy = 0.0, mean_dy_n = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dy = double(g[r * d + j]) * gn->data[j];
                        mean_dy += dy;
                        mean_dy_n += dy * normalized[r * d + j];
                    }
                    mean_dy /= double(d);
                    mean_dy_n /= double(d);
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dy = double(g[r * d + j]) * gn->data[j];
                        dx[r * d + j] = static_cast<float>(inv_std[r] * (dy - mean_dy - normalized[r * d + j] * mean_dy_n));
                    }
                }
                xn->accumulate(dx);
            }
        });
}

// ---------------------------------------------------------------------------
// Attention

/// Multi-head scaled dot-product self-attention.
///
/// `qkv` is [N x 3C] with each row laid out as [query | key | value].
/// `segments` partitions the N rows into independent sequences; attention
/// never crosses a segment boundary. With `causal`, position i only attends
/// to positions <= i of its own segment.
inline Tensor self_attention(const Tensor& qkv, const std::vector<std::size_t>& segments, std::size_t heads,
                             bool causal) {
    detail::require_rank(qkv, 2, "self_attention");
    const std::size_t n = qkv.dim(0);
    if (qkv.dim(1) % 3 != 0) throw DimensionError("self_attention: width must be 3*C");
    const std::size_t c = qkv.dim(1) / 3;
    if (heads == 0 || c % heads != 0) throw DimensionError("self_attention: heads must divide model width");
    std::size_t covered = 0;
    for (auto len : segments) covered += len;
    if (covered != n) throw DimensionError("self_attention: segments do not cover all rows");
    const std::size_t dh = c / heads;
    const float scale_factor = 1.0f / std::sqrt(static_cast<float>(dh));
    const auto stride3 = Eigen::OuterStride<>(static_cast<Eigen::Index>(3 * c));
    const auto stride1 = Eigen::OuterStride<>(static_cast<Eigen::Index>(c));

    std::vector<float> out(n * c, 0.0f);
    auto probs = std::make_shared<std::vector<detail::RowMat>>();
    probs->reserve(segments.size() * heads);
    const float* base = qkv.data().data();
    std::size_t offset = 0;
    for (std::size_t len : segments) {
        const auto T = static_cast<Eigen::Index>(len);
        const auto D = static_cast<Eigen::Index>(dh);
        for (std::size_t h = 0; h < heads; ++h) {
            detail::ConstStridedMap Q(base + offset * 3 * c + h * dh, T, D, stride3);
            detail::ConstStridedMap K(base + offset * 3 * c + c + h * dh, T, D, stride3);
            detail::ConstStridedMap V(base + offset * 3 * c + 2 * c + h * dh, T, D, stride3);
            detail::RowMat P = (Q * K.transpose()) * scale_factor;
            for (Eigen::Index i = 0; i < T; ++i) {
                if (causal) {
                    for (Eigen::Index j = i + 1; j < T; ++j) P(i, j) = -std::numeric_limits<float>::infinity();
                }
                const float peak = P.row(i).maxCoeff();
                double denom = 0.0;
                for (Eigen::Index j = 0; j < T; ++j) {
                    const float e = std::exp(P(i, j) - peak);
                    P(i, j) = e;
                    denom += e;
                }
                P.row(i) /= static_cast<float>(denom);
            }
            detail::StridedMap O(out.data() + offset * c + h * dh, T, D, stride1);
            O.noalias() = P * V;
            probs->push_back(std::move(P));
        }
        offset += len;
    }
    return detail::make_result(
        Shape{n, c}, std::move(out), {&qkv}, "self_attention",
        [qn = qkv.node().get(), probs, segments, heads, c, dh, scale_factor](detail::Node& self) {
            const auto s3 = Eigen::OuterStride<>(static_cast<Eigen::Index>(3 * c));
            const auto s1 = Eigen::OuterStride<>(static_cast<Eigen::Index>(c));
            std::vector<float> grad(qn->data.size(), 0.0f);
            const float* base = qn->data.data();
            std::size_t offset = 0, slot = 0;
            for (std::size_t len : segments) {
                const auto T = static_cast<Eigen::Index>(len);
                const auto D = static_cast<Eigen::Index>(dh);
                for (std::size_t h = 0; h < heads; ++h, ++slot) {
                    const detail::RowMat& P = (*probs)[slot];
                    detail::ConstStridedMap Q(base + offset * 3 * c + h * dh, T, D, s3);
                    detail::ConstStridedMap K(base + offset * 3 * c + c + h * dh, T, D, s3);
                    detail::ConstStridedMap V(base + offset * 3 * c + 2 * c + h * dh, T, D, s3);
                    detail::ConstStridedMap dO(self.grad.data() + offset * c + h * dh, T, D, s1);
                    detail::StridedMap dQ(grad.data() + offset * 3 * c + h * dh, T, D, s3);
                    detail::StridedMap dK(grad.data() + offset * 3 * c + c + h * dh, T, D, s3);
                    detail::StridedMap dV(grad.data() + offset * 3 * c + 2 * c + h * dh, T, D, s3);
                    dV.noalias() = P.transpose() * dO;
                    detail::RowMat dP = dO * V.transpose();
                    for (Eigen::Index i = 0; i < T; ++i) {
                        const float dot = P.row(i).dot(dP.row(i));
                        dP.row(i) = (P.row(i).array() * (dP.row(i).array() - dot)).matrix();
                    }
                    dP *= scale_factor;
                    dQ.noalias() = dP * K;
                    dK.noalias() = dP.transpose() * Q;
                }
                offset += len;
            }
            qn->accumulate(grad);
        });
}

/// Inverted dropout. Identity when not training or p == 0.
inline Tensor dropout(const Tensor& x, float p, Rng& rng, bool training) {
    if (!training || p <= 0.0f) return x;
    if (p >= 1.0f) throw DomainError("dropout: probability must be < 1");
    const float keep_scale = 1.0f / (1.0f - p);
    std::vector<float> mask(x.numel());
    for (auto& m : mask) m = rng.uniform() < p ? 0.0f : keep_scale;
    std::vector<float> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * mask[i];
    return detail::make_result(x.shape(), std::move(out), {&x}, "dropout",
                               [xn = x.node().get(), mask = std::move(mask)](detail::Node& self) {
                                   std::vector<float> g(mask.size());
                                   for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * mask[i];
                                   xn->accumulate(g);
                               });
}

// ---------------------------------------------------------------------------
// Convolution

struct ConvGeometry {
    std::size_t channels, height, width;  // of the conv input
    std::size_t kernel, stride, padding;
    std::size_t out_height, out_width;
};

namespace detail {

inline std::size_t conv_out_size(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding,
                                 const char* op) {
    if (stride == 0 || kernel == 0) throw DimensionError(std::string(op) + ": stride and kernel must be positive");
    const std::ptrdiff_t span = static_cast<std::ptrdiff_t>(in + 2 * padding) - static_cast<std::ptrdiff_t>(kernel);
    if (span < 0 || span % static_cast<std::ptrdiff_t>(stride) != 0) {
        throw DimensionError(std::string(op) + ": output size (" + std::to_string(in) + "+2*" + std::to_string(padding) +
                             "-" + std::to_string(kernel) + ")/" + std::to_string(stride) + "+1 is not integral");
    }
    return static_cast<std::size_t>(span) / stride + 1;
}

// cols[(c*k*k + ky*k + kx), (oy*Wo + ox)]
inline void im2col(const float* img, const ConvGeometry& g, float* cols) {
    const std::size_t plane = g.out_height * g.out_width;
    for (std::size_t c = 0; c < g.channels; ++c) {
        for (std::size_t ky = 0; ky < g.kernel; ++ky) {
            for (std::size_t kx = 0; kx < g.kernel; ++kx) {
                float* dst = cols + ((c * g.kernel + ky) * g.kernel + kx) * plane;
                for (std::size_t oy = 0; oy < g.out_height; ++oy) {
                    const std::ptrdiff_t iy = std::ptrdiff_t(oy * g.stride + ky) - std::ptrdiff_t(g.padding);
                    for (std::size_t ox = 0; ox < g.out_width; ++ox) {
                        const std::ptrdiff_t ix = std::ptrdiff_t(ox * g.stride + kx) - std::ptrdiff_t(g.padding);
                        const bool inside = iy >= 0 && ix >= 0 && iy < std::ptrdiff_t(g.height) && ix < std::ptrdiff_t(g.width);
                        dst[oy * g.out_width + ox] = inside ? img[(c * g.height + iy) * g.width + ix] : 0.0f;
                    }
                }
            }
        }
    }
}

inline void col2im(const float* cols, const ConvGeometry& g, float* img) {
    const std::size_t plane = g.out_height * g.out_width;
    for (std::size_t c = 0; c < g.channels; ++c) {
        for (std::size_t ky = 0; ky < g.kernel; ++ky) {
            for (std::size_t kx = 0; kx < g.kernel; ++kx) {
                const float* src = cols + ((c * g.kernel + ky) * g.kernel + kx) * plane;
                for (std::size_t oy = 0; oy < g.out_height; ++oy) {
                    const std::ptrdiff_t iy = std::ptrdiff_t(oy * g.stride + ky) - std::ptrdiff_t(g.padding);
                    if (iy < 0 || iy >= std::ptrdiff_t(g.height)) continue;
                    for (std::size_t ox = 0; ox < g.out_width; ++ox) {
                        const std::ptrdiff_t ix = std::ptrdiff_t(ox * g.stride + kx) - std::ptrdiff_t(g.padding);
                        if (ix < 0 || ix >= std::ptrdiff_t(g.width)) continue;
                        img[(c * g.height + iy) * g.width + ix] += src[oy * g.out_width + ox];
                    }
                }
            }
        }
    }
}

}  // namespace detail

/// Cross-correlation. input [B x C x H x W], weight [O x C x k x k].
inline Tensor conv2d(const Tensor& input, const Tensor& weight, std::size_t stride, std::size_t padding) {
    detail::require_rank(input, 4, "conv2d");
    detail::require_rank(weight, 4, "conv2d");
    const std::size_t batch = input.dim(0), out_ch = weight.dim(0), k = weight.dim(2);
    if (weight.dim(1) != input.dim(1) || weight.dim(3) != k) throw DimensionError("conv2d: weight/input channel mismatch");
    ConvGeometry g{input.dim(1), input.dim(2), input.dim(3), k, stride, padding, 0, 0};
    g.out_height = detail::conv_out_size(g.height, k, stride, padding, "conv2d");
    g.out_width = detail::conv_out_size(g.width, k, stride, padding, "conv2d");
    const std::size_t patch = g.channels * k * k, plane = g.out_height * g.out_width;
    const std::size_t in_size = g.channels * g.height * g.width;
    std::vector<float> out(batch * out_ch * plane);
    std::vector<float> cols(patch * plane);
    for (std::size_t b = 0; b < batch; ++b) {
        detail::im2col(input.data().data() + b * in_size, g, cols.data());
        detail::gemm(weight.data().data(), false, cols.data(), false, out.data() + b * out_ch * plane, out_ch, plane, patch,
                     false);
    }
    return detail::make_result(
        Shape{batch, out_ch, g.out_height, g.out_width}, std::move(out), {&input, &weight}, "conv2d",
        [in = input.node().get(), wn = weight.node().get(), g, batch, out_ch, patch, plane, in_size](detail::Node& self) {
            std::vector<float> cols(patch * plane);
            std::vector<float> dweight(out_ch * patch, 0.0f);
            std::vector<float> dinput(in->requires_grad ? batch * in_size : 0, 0.0f);
            for (std::size_t b = 0; b < batch; ++b) {
                const float* dout = self.grad.data() + b * out_ch * plane;
                if (wn->requires_grad) {
                    detail::im2col(in->data.data() + b * in_size, g, cols.data());
                    detail::gemm(dout, false, cols.data(), true, dweight.data(), out_ch, patch, plane, true);
                }
                if (in->requires_grad) {
                    detail::gemm(wn->data.data(), true, dout, false, cols.data(), patch, plane, out_ch, false);
                    detail::col2im(cols.data(), g, dinput.data() + b * in_size);
                }
            }
            if (wn->requires_grad) wn->accumulate(dweight);
            if (in->requires_grad) in->accumulate(dinput);
        });
}

/// Adjoint of conv2d with the same weight/stride/padding.
/// input [B x O x H x W], weight [O x C x k x k] -> [B x C x H' x W'] with
/// H' = (H - 1) * stride - 2 * padding + k.
inline Tensor conv_transpose2d(const Tensor& input, const Tensor& weight, std::size_t stride, std::size_t padding) {
    detail::require_rank(input, 4, "conv_transpose2d");
    detail::require_rank(weight, 4, "conv_transpose2d");
    const std::size_t batch = input.dim(0), in_ch = weight.dim(0), k = weight.dim(2);
    if (input.dim(1) != in_ch || weight.dim(3) != k) throw DimensionError("conv_transpose2d: weight/input channel mismatch");
    if (stride == 0) throw DimensionError("conv_transpose2d: stride must be positive");
    const std::ptrdiff_t oh = std::ptrdiff_t(input.dim(2) - 1) * std::ptrdiff_t(stride) - 2 * std::ptrdiff_t(padding) + std::ptrdiff_t(k);
    const std::ptrdiff_t ow = std::ptrdiff_t(input.dim(3) - 1) * std::ptrdiff_t(stride) - 2 * std::ptrdiff_t(padding) + std::ptrdiff_t(k);
    if (oh <= 0 || ow <= 0) throw DimensionError("conv_transpose2d: non-positive output size");
    // Geometry of the forward conv this op is the adjoint of.
    ConvGeometry g{weight.dim(1), std::size_t(oh), std::size_t(ow), k, stride, padding, input.dim(2), input.dim(3)};
    const std::size_t patch = g.channels * k * k, plane = g.out_height * g.out_width;
    const std::size_t out_size = g.channels * g.height * g.width;
    std::vector<float> out(batch * out_size, 0.0f);
    std::vector<float> cols(patch * plane);
    for (std::size_t b = 0; b < batch; ++b) {
        detail::gemm(weight.data().data(), true, input.data().data() + b * in_ch * plane, false, cols.data(), patch, plane,
                     in_ch, false);
        detail::col2im(cols.data(), g, out.data() + b * out_size);
    }
    return detail::make_result(
        Shape{batch, g.channels, g.height, g.width}, std::move(out), {&input, &weight}, "conv_transpose2d",
        [in = input.node().get(), wn = weight.node().get(), g, batch, in_ch, patch, plane, out_size](detail::Node& self) {
            std::vector<float> cols(patch * plane);
            std::vector<float> dweight(in_ch * patch, 0.0f);
            std::vector<float> dinput(in->requires_grad ? batch * in_ch * plane : 0, 0.0f);
            for (std::size_t b = 0; b < batch; ++b) {
                detail::im2col(self.grad.data() + b * out_size, g, cols.data());
                if (wn->requires_grad) {
                    detail::gemm(in->data.data() + b * in_ch * plane, false, cols.data(), true, dweight.data(), in_ch,
                                 patch, plane, true);
                }
                if (in->requires_grad) {
                    detail::gemm(wn->data.data(), false, cols.data(), false, dinput.data() + b * in_ch * plane, in_ch,
                                 plane, patch, false);
                }
            }
            if (wn->requires_grad) wn->accumulate(dweight);
            if (in->requires_grad) in->accumulate(dinput);
        });
}

/// x [B x C x H x W] + bias[C].
inline Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
    detail::require_rank(x, 4, "add_channel_bias");
    const std::size_t channels = x.dim(1), plane = x.dim(2) * x.dim(3), groups = x.dim(0) * channels;
    if (bias.numel() != channels) throw DimensionError("add_channel_bias: bias length must equal channel count");
    std::vector<float> out(x.data().begin(), x.data().end());
    for (std::size_t g = 0; g < groups; ++g) {
        const float b = bias.data()[g % channels];
        float* row = out.data() + g * plane;
        for (std::size_t i = 0; i < plane; ++i) row[i] += b;
    }
    return detail::make_result(x.shape(), std::move(out), {&x, &bias}, "add_channel_bias",
                               [xn = x.node().get(), bn = bias.node().get(), channels, plane, groups](detail::Node& self) {
                                   if (xn->requires_grad) xn->accumulate(self.grad);
                                   if (bn->requires_grad) {
                                       std::vector<double> acc(channels, 0.0);
                                       for (std::size_t g = 0; g < groups; ++g) {
                                           const float* row = self.grad.data() + g * plane;
                                           double sum = 0.0;
                                           for (std::size_t i = 0; i < plane; ++i) sum += row[i];
                                           acc[g % channels] += sum;
                                       }
                                       bn->accumulate(std::vector<float>(acc.begin(), acc.end()));
                                   }
                               });
}

}  // namespace textbin
