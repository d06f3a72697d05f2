#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>

#include "mixdiv/tensor.hpp"

namespace mixdiv {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

template <typename T>
using Node = detail::Node<T>;

template <typename T>
Tensor<T> make_result(Shape shape, Buffer<T> data, std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void(Node<T>&)> backward) {
  auto out = Tensor<T>::from(std::move(shape), std::move(data));
  if (!grad_enabled()) return out;
  bool tracked = false;
  for (auto* in : inputs) tracked = tracked || in->requires_grad();
  if (!tracked) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  for (auto* in : inputs) node.parents.push_back(in->node());
  node.backward = std::move(backward);
  return out;
}

template <typename T>
void require_rank2(const Tensor<T>& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
  }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ");
  }
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree for " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  Buffer<T> out(m * n);
  MatMap<T>(out.data(), m, n).noalias() =
      ConstMatMap<T>(a.data().data(), m, k) * ConstMatMap<T>(b.data().data(), k, n);
  return make_result<T>({m, n}, std::move(out), {&a, &b}, [m, k, n](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    ConstMatMap<T> dc(self.grad.data(), m, n);
    if (pa.requires_grad) {
      MatMap<T>(pa.grad.data(), m, k).noalias() += dc * ConstMatMap<T>(pb.data.data(), k, n).transpose();
    }
    if (pb.requires_grad) {
      MatMap<T>(pb.grad.data(), k, n).noalias() += ConstMatMap<T>(pa.data.data(), m, k).transpose() * dc;
    }
  });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  Buffer<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, [](Node<T>& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  Buffer<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, [](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (pa.requires_grad) pa.grad[i] += self.grad[i];
      if (pb.requires_grad) pb.grad[i] -= self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  Buffer<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, [](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (pa.requires_grad) pa.grad[i] += self.grad[i] * pb.data[i];
      if (pb.requires_grad) pb.grad[i] += self.grad[i] * pa.data[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  Buffer<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
  return make_result<T>(a.shape(), std::move(out), {&a}, [factor](Node<T>& self) {
    auto& pa = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * factor;
  });
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  require_rank2(x, "add_bias");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (bias.numel() != n) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match " + shape_str(x.shape()));
  }
  Buffer<T> out(x.numel());
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = x.data()[r * n + c] + bias.data()[c];
  return make_result<T>(x.shape(), std::move(out), {&x, &bias}, [m, n](Node<T>& self) {
    auto& px = *self.parents[0];
    auto& pb = *self.parents[1];
    ConstMatMap<T> g(self.grad.data(), m, n);
    if (px.requires_grad) MatMap<T>(px.grad.data(), m, n) += g;
    if (pb.requires_grad) MatMap<T>(pb.grad.data(), 1, n) += g.colwise().sum();
  });
}

template <typename T>
Tensor<T> scale_rows(const Tensor<T>& x, std::span<const T> weights) {
  require_rank2(x, "scale_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (weights.size() != m) {
    throw DimensionError("scale_rows: " + std::to_string(weights.size()) + " weights for " + shape_str(x.shape()));
  }
  Buffer<T> w(weights.begin(), weights.end());
  Buffer<T> out(x.numel());
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = x.data()[r * n + c] * w[r];
  return make_result<T>(x.shape(), std::move(out), {&x}, [w = std::move(w), n](Node<T>& self) {
    auto& px = *self.parents[0];
    for (std::size_t r = 0; r < w.size(); ++r)
      for (std::size_t c = 0; c < n; ++c) px.grad[r * n + c] += self.grad[r * n + c] * w[r];
  });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  using Array = Eigen::Array<T, Eigen::Dynamic, 1>;
  using ConstArrayMap = Eigen::Map<const Array>;
  static constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
  static constexpr T k = T(0.044715);
  const auto n = static_cast<Eigen::Index>(x.numel());
  ConstArrayMap xv(x.data().data(), n);
  Buffer<T> th(x.numel());
  Eigen::Map<Array>(th.data(), n) = (c * (xv + k * xv.cube())).tanh();
  ConstArrayMap tv(th.data(), n);
  Buffer<T> out(x.numel());
  Eigen::Map<Array>(out.data(), n) = T(0.5) * xv * (T(1) + tv);
  const T corruption = debug::corrupt_gelu_gradient() ? T(1.05) : T(1);
  return make_result<T>(x.shape(), std::move(out), {&x}, [corruption, n, th = std::move(th)](Node<T>& self) {
    auto& px = *self.parents[0];
    ConstArrayMap xv(px.data.data(), n);
    ConstArrayMap tv(th.data(), n);
    ConstArrayMap g(self.grad.data(), n);
    Eigen::Map<Array>(px.grad.data(), n) +=
        g * corruption *
        (T(0.5) * (T(1) + tv) + T(0.5) * xv * (T(1) - tv.square()) * c * (T(1) + T(3) * k * xv.square()));
  });
}
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  require_rank2(x, "layer_norm");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (gain.numel() != n || bias.numel() != n) {
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                         " vs input " + shape_str(x.shape()));
  }
  Buffer<T> out(x.numel());
  Buffer<T> normalized(x.numel());
  Buffer<T> inv_std(m);
  for (std::size_t r = 0; r < m; ++r) {
    const T* row = x.data().data() + r * n;
    T mean = 0;
    for (std::size_t c = 0; c < n; ++c) mean += row[c];
    mean /= T(n);
    T var = 0;
    for (std::size_t c = 0; c < n; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= T(n);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t c = 0; c < n; ++c) {
      T xh = (row[c] - mean) * inv_std[r];
      normalized[r * n + c] = xh;
      out[r * n + c] = xh * gain.data()[c] + bias.data()[c];
    }
  }
  return make_result<T>(
      x.shape(), std::move(out), {&x, &gain, &bias},
      [m, n, normalized = std::move(normalized), inv_std = std::move(inv_std)](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        Buffer<T> dxh(n);
        for (std::size_t r = 0; r < m; ++r) {
          const T* dy = self.grad.data() + r * n;
          const T* xh = normalized.data() + r * n;
          T mean_d = 0, mean_dx = 0;
          for (std::size_t c = 0; c < n; ++c) {
            if (pg.requires_grad) pg.grad[c] += dy[c] * xh[c];
            if (pb.requires_grad) pb.grad[c] += dy[c];
            dxh[c] = dy[c] * pg.data[c];
            mean_d += dxh[c];
            mean_dx += dxh[c] * xh[c];
          }
          if (!px.requires_grad) continue;
          mean_d /= T(n);
          mean_dx /= T(n);
          for (std::size_t c = 0; c < n; ++c)
            px.grad[r * n + c] += inv_std[r] * (dxh[c] - mean_d - xh[c] * mean_dx);
        }
      });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  const std::size_t len = x.dim(axis);
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  Buffer<T> out(x.numel());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, x.data()[base + j * inner]);
      T total = 0;
      for (std::size_t j = 0; j < len; ++j) {
        T e = std::exp(x.data()[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= total;
    }
  }
  return make_result<T>(x.shape(), std::move(out), {&x}, [outer, inner, len](Node<T>& self) {
    auto& px = *self.parents[0];
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        T dot = 0;
        for (std::size_t j = 0; j < len; ++j) dot += self.grad[base + j * inner] * self.data[base + j * inner];
        for (std::size_t j = 0; j < len; ++j) {
          const std::size_t idx = base + j * inner;
          px.grad[idx] += self.data[idx] * (self.grad[idx] - dot);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const int> ids) {
  require_rank2(table, "embedding_lookup");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<int> rows(ids.begin(), ids.end());
  Buffer<T> out(rows.size() * d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || static_cast<std::size_t>(rows[i]) >= vocab) {
      throw ContractError("embedding_lookup: token id " + std::to_string(rows[i]) + " outside vocabulary of size " +
                          std::to_string(vocab));
    }
    std::copy_n(table.data().data() + rows[i] * d, d, out.data() + i * d);
  }
  const std::size_t n = rows.size();
  return make_result<T>({n, d}, std::move(out), {&table}, [rows = std::move(rows), d](Node<T>& self) {
    auto& pt = *self.parents[0];
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t c = 0; c < d; ++c) pt.grad[rows[i] * d + c] += self.grad[i * d + c];
  });
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, RngStream& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ContractError("dropout: rate must lie in [0, 1)");
  if (rate == 0.0) return x;
  const T keep_scale = T(1.0 / (1.0 - rate));
  // Drop when a raw 64-bit draw falls below rate * 2^64.
  const auto threshold = static_cast<std::uint64_t>(std::ldexp(rate, 64));
  auto& engine = rng.engine();
  Buffer<T> factor(x.numel());
  Buffer<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    factor[i] = engine() < threshold ? T(0) : keep_scale;
    out[i] = x.data()[i] * factor[i];
  }
  return make_result<T>(x.shape(), std::move(out), {&x}, [factor = std::move(factor)](Node<T>& self) {
    auto& px = *self.parents[0];
    for (std::size_t i = 0; i < factor.size(); ++i) px.grad[i] += self.grad[i] * factor[i];
  });
}

template <typename T>
Tensor<T> concat_rows(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw ContractError("concat_rows: nothing to concatenate");
  const std::size_t d = parts[0].dim(1);
  std::size_t rows = 0;
  Buffer<T> out;
  for (const auto& p : parts) {
    require_rank2(p, "concat_rows");
    if (p.dim(1) != d) {
      throw DimensionError("concat_rows: width mismatch " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    }
    rows += p.dim(0);
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  auto result = Tensor<T>::from({rows, d}, std::move(out));
  if (!grad_enabled()) return result;
  bool tracked = std::any_of(parts.begin(), parts.end(), [](const Tensor<T>& p) { return p.requires_grad(); });
  if (!tracked) return result;
  auto& node = *result.node();
  node.requires_grad = true;
  for (const auto& p : parts) node.parents.push_back(p.node());
  node.backward = [](Node<T>& self) {
    std::size_t offset = 0;
    for (auto& p : self.parents) {
      if (p->requires_grad) {
        for (std::size_t i = 0; i < p->data.size(); ++i) p->grad[i] += self.grad[offset + i];
      }
      offset += p->data.size();
    }
  };
  return result;
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  require_rank2(x, "slice_rows");
  if (begin > end || end > x.dim(0)) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(end) + ") out of range for " +
                         shape_str(x.shape()));
  }
  const std::size_t d = x.dim(1);
  Buffer<T> out(x.data().begin() + begin * d, x.data().begin() + end * d);
  return make_result<T>({end - begin, d}, std::move(out), {&x}, [begin, d](Node<T>& self) {
    auto& px = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[begin * d + i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = 0;
  for (T v : x.data()) total += v;
  return make_result<T>({1}, {total}, {&x}, [](Node<T>& self) {
    auto& px = *self.parents[0];
    for (auto& g : px.grad) g += self.grad[0];
  });
}

template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const AttentionSpec& spec) {
  require_rank2(q, "attention");
  require_rank2(k, "attention");
  require_rank2(v, "attention");
  const std::size_t d = q.dim(1);
  if (k.dim(1) != d || v.dim(1) != d || q.dim(0) != spec.batch * spec.q_len || k.dim(0) != spec.batch * spec.k_len ||
      v.dim(0) != k.dim(0)) {
    throw DimensionError("attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " +
                         shape_str(v.shape()) + " inconsistent with batch layout");
  }
  if (spec.heads == 0 || d % spec.heads != 0) {
    throw DimensionError("attention: width " + std::to_string(d) + " not divisible by heads");
  }
  if (!spec.key_valid.empty() && spec.key_valid.size() != spec.batch * spec.k_len) {
    throw DimensionError("attention: key mask has " + std::to_string(spec.key_valid.size()) + " entries, expected " +
                         std::to_string(spec.batch * spec.k_len));
  }
  const std::size_t dh = d / spec.heads, lq = spec.q_len, lk = spec.k_len;
  const T scale_factor = T(1) / std::sqrt(T(dh));
  const T neg_inf = -std::numeric_limits<T>::infinity();

  // allowed(b, i, j)
  auto allowed = [&spec, lk](std::size_t b, std::size_t i, std::size_t j) {
    if (!spec.key_valid.empty() && !spec.key_valid[b * lk + j]) return false;
    return !spec.causal || j <= i + spec.causal_offset;
  };

  Buffer<T> probs(spec.batch * spec.heads * lq * lk, T(0));
  Buffer<T> out(q.numel(), T(0));
  RowMat<T> scores(lq, lk);
  for (std::size_t b = 0; b < spec.batch; ++b) {
    for (std::size_t h = 0; h < spec.heads; ++h) {
      ConstStridedMap<T> qh(q.data().data() + b * lq * d + h * dh, lq, dh, Eigen::OuterStride<>(d));
      ConstStridedMap<T> kh(k.data().data() + b * lk * d + h * dh, lk, dh, Eigen::OuterStride<>(d));
      ConstStridedMap<T> vh(v.data().data() + b * lk * d + h * dh, lk, dh, Eigen::OuterStride<>(d));
      scores.noalias() = (qh * kh.transpose()) * scale_factor;
      MatMap<T> p(probs.data() + (b * spec.heads + h) * lq * lk, lq, lk);
      for (std::size_t i = 0; i < lq; ++i) {
        T mx = neg_inf;
        for (std::size_t j = 0; j < lk; ++j) {
          if (allowed(b, i, j)) mx = std::max(mx, scores(i, j));
        }
        if (mx == neg_inf) continue;  // nothing visible: zero row
        T total = 0;
        for (std::size_t j = 0; j < lk; ++j) {
          T e = allowed(b, i, j) ? std::exp(scores(i, j) - mx) : T(0);
          p(i, j) = e;
          total += e;
        }
        p.row(i) /= total;
      }
      StridedMap<T> oh(out.data() + b * lq * d + h * dh, lq, dh, Eigen::OuterStride<>(d));
      oh.noalias() = p * vh;
    }
  }

  const std::size_t batch = spec.batch, heads = spec.heads;
  return make_result<T>(
      q.shape(), std::move(out), {&q, &k, &v},
      [probs = std::move(probs), batch, heads, lq, lk, d, dh, scale_factor](Node<T>& self) {
        auto& pq = *self.parents[0];
        auto& pk = *self.parents[1];
        auto& pv = *self.parents[2];
        RowMat<T> dp(lq, lk), ds(lq, lk);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t qoff = b * lq * d + h * dh, koff = b * lk * d + h * dh;
            ConstMatMap<T> p(probs.data() + (b * heads + h) * lq * lk, lq, lk);
            ConstStridedMap<T> dout(self.grad.data() + qoff, lq, dh, Eigen::OuterStride<>(d));
            ConstStridedMap<T> qh(pq.data.data() + qoff, lq, dh, Eigen::OuterStride<>(d));
            ConstStridedMap<T> kh(pk.data.data() + koff, lk, dh, Eigen::OuterStride<>(d));
            ConstStridedMap<T> vh(pv.data.data() + koff, lk, dh, Eigen::OuterStride<>(d));
            if (pv.requires_grad) {
              StridedMap<T> dv(pv.grad.data() + koff, lk, dh, Eigen::OuterStride<>(d));
              dv.noalias() += p.transpose() * dout;
            }
            if (!pq.requires_grad && !pk.requires_grad) continue;
            dp.noalias() = dout * vh.transpose();
            for (std::size_t i = 0; i < lq; ++i) {
              T dot = p.row(i).dot(dp.row(i));
              ds.row(i) = p.row(i).cwiseProduct((dp.row(i).array() - dot).matrix());
            }
            ds *= scale_factor;
            if (pq.requires_grad) {
              StridedMap<T> dq(pq.grad.data() + qoff, lq, dh, Eigen::OuterStride<>(d));
              dq.noalias() += ds * kh;
            }
            if (pk.requires_grad) {
              StridedMap<T> dk(pk.grad.data() + koff, lk, dh, Eigen::OuterStride<>(d));
              dk.noalias() += ds.transpose() * qh;
            }
          }
        }
      });
}

template <typename T>
Tensor<T> cross_entropy_soft(const Tensor<T>& logits, const Tensor<T>& soft_labels, const Mask& position_mask) {
  require_rank2(logits, "cross_entropy_soft");
  require_same_shape(logits, soft_labels, "cross_entropy_soft");
  const std::size_t rows = logits.dim(0), vocab = logits.dim(1);
  if (position_mask.size() != rows) {
    throw DimensionError("cross_entropy_soft: mask has " + std::to_string(position_mask.size()) + " entries for " +
                         std::to_string(rows) + " rows");
  }
  std::size_t active = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!position_mask[r]) continue;
    ++active;
    double total = 0;
    for (std::size_t c = 0; c < vocab; ++c) total += soft_labels.data()[r * vocab + c];
    if (std::abs(total - 1.0) > 1e-6) {
      throw ContractError("cross_entropy_soft: label row " + std::to_string(r) + " sums to " + std::to_string(total));
    }
  }
  if (active == 0) throw ContractError("cross_entropy_soft: every position is masked");

  Buffer<T> probs(logits.numel(), T(0));
  T loss = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!position_mask[r]) continue;
    const T* z = logits.data().data() + r * vocab;
    const T* y = soft_labels.data().data() + r * vocab;
    T mx = *std::max_element(z, z + vocab);
    T total = 0;
    for (std::size_t c = 0; c < vocab; ++c) total += std::exp(z[c] - mx);
    const T log_total = std::log(total) + mx;
    for (std::size_t c = 0; c < vocab; ++c) {
      probs[r * vocab + c] = std::exp(z[c] - log_total);
      if (y[c] != T(0)) loss -= y[c] * (z[c] - log_total);
    }
  }
  const T inv_active = T(1) / T(active);
  loss *= inv_active;
  Mask mask = position_mask;
  return make_result<T>(
      {1}, {loss}, {&logits, &soft_labels},
      [probs = std::move(probs), mask = std::move(mask), rows, vocab, inv_active](Node<T>& self) {
        auto& pz = *self.parents[0];
        auto& py = *self.parents[1];
        const T g = self.grad[0] * inv_active;
        for (std::size_t r = 0; r < rows; ++r) {
          if (!mask[r]) continue;
          T label_mass = 0;
          for (std::size_t c = 0; c < vocab; ++c) label_mass += py.data[r * vocab + c];
          for (std::size_t c = 0; c < vocab; ++c) {
            const std::size_t i = r * vocab + c;
            if (pz.requires_grad) pz.grad[i] += g * (probs[i] * label_mass - py.data[i]);
            if (py.requires_grad) py.grad[i] -= g * std::log(probs[i]);
          }
        }
      });
}

#define MIXDIV_INSTANTIATE_OPS(T)                                                                       \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> scale(const Tensor<T>&, T);                                                        \
  template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> scale_rows(const Tensor<T>&, std::span<const T>);                                  \
  template Tensor<T> gelu(const Tensor<T>&);                                                            \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);               \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                            \
  template Tensor<T> embedding_lookup(const Tensor<T>&, std::span<const int>);                          \
  template Tensor<T> dropout(const Tensor<T>&, double, RngStream&);                                     \
  template Tensor<T> concat_rows(std::span<const Tensor<T>>);                                           \
  template Tensor<T> slice_rows(const Tensor<T>&, std::size_t, std::size_t);                            \
  template Tensor<T> sum(const Tensor<T>&);                                                             \
  template Tensor<T> attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const AttentionSpec&); \
  template Tensor<T> cross_entropy_soft(const Tensor<T>&, const Tensor<T>&, const Mask&);

MIXDIV_INSTANTIATE_OPS(float)
MIXDIV_INSTANTIATE_OPS(double)

}  // namespace mixdiv
