#include "relab/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <memory>
#include <numbers>
#include <sstream>

#include <Eigen/Core>

namespace relab {

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
bool bit_equal(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(T)) == 0;
}

template bool bit_equal(const Tensor<float>&, const Tensor<float>&);
template bool bit_equal(const Tensor<double>&, const Tensor<double>&);

// ---------------------------------------------------------------------------
// Tape

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  nodes_.push_back(Node{std::move(value), {}, {}, false, false});
  return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::parameter(const std::string& name, Tensor<T> value) {
  nodes_.push_back(Node{std::move(value), {}, name, true, true});
  return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::record(const char* op, Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
  if (!value.all_finite()) {
    throw NumericError(std::string("non-finite value produced by ") + op + " with output shape " +
                       shape_to_string(value.shape()));
  }
  bool needs = false;
  for (const auto& in : inputs) {
    if (in.tape != this) throw InvalidArgument(std::string(op) + ": operands recorded on different tapes");
    needs = needs || nodes_[in.id].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), needs ? std::move(fn) : BackwardFn{}, {}, needs, false});
  return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
Tensor<T>& Tape<T>::grad_slot(std::size_t id) {
  auto& g = grads_[id];
  if (g.empty() && !nodes_[id].value.empty()) g = Tensor<T>(nodes_[id].value.shape());
  return g;
}

template <typename T>
void Tape<T>::accumulate(std::size_t id, const Tensor<T>& g) {
  if (!nodes_[id].requires_grad) return;
  auto& slot = grad_slot(id);
  auto dst = slot.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <typename T>
GradientMap<T> Tape<T>::backward(Var<T> loss) {
  if (loss.tape != this) throw InvalidArgument("backward: loss was recorded on a different tape");
  if (loss.value().size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_to_string(loss.shape()));
  }
  grads_.assign(nodes_.size(), Tensor<T>{});
  grad_slot(loss.id)[0] = T{1};
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    auto& node = nodes_[i];
    if (!node.backward || grads_[i].empty()) continue;
    node.backward(*this, grads_[i]);
  }
  GradientMap<T> out;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const auto& node = nodes_[i];
    if (!node.is_parameter) continue;
    auto& g = grads_[i];
    out[node.name] = g.empty() ? Tensor<T>(node.value.shape()) : std::move(g);
  }
  grads_.clear();
  return out;
}

template class Tape<float>;
template class Tape<double>;

// ---------------------------------------------------------------------------
// Kernels. Matrix products go through Eigen, which is single-threaded here and
// deterministic for a given build and operand shape.

namespace {

template <typename T>
using RowMajor = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMajor<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMajor<T>>;

// c[m,n] += a[m,k] * b[k,n]
template <typename T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
  MutMap<T>(c, M, N).noalias() += ConstMap<T>(a, M, K) * ConstMap<T>(b, K, N);
}

// c[m,n] += a[r,m]^T * b[r,n]
template <typename T>
void gemm_tn(std::size_t r, std::size_t m, std::size_t n, const T* a, const T* b, T* c) {
  const auto R = static_cast<Eigen::Index>(r), M = static_cast<Eigen::Index>(m), N = static_cast<Eigen::Index>(n);
  MutMap<T>(c, M, N).noalias() += ConstMap<T>(a, R, M).transpose() * ConstMap<T>(b, R, N);
}

template <typename T>
std::vector<T> transposed(std::size_t rows, std::size_t cols, const T* a) {
  std::vector<T> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = a[i * cols + j];
  }
  return out;
}

// c[m,n] += a[m,k] * b[n,k]^T
template <typename T>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
  MutMap<T>(c, M, N).noalias() += ConstMap<T>(a, M, K) * ConstMap<T>(b, N, K).transpose();
}

void require_rank2(const char* op, const char* name, const Shape& s) {
  if (s.size() != 2) {
    throw ShapeError(std::string(op) + ": operand " + name + " must be rank 2, got " + shape_to_string(s));
  }
}

// Splits a shape around `axis` into (outer, axis length, inner).
struct AxisView {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisView axis_view(const char* op, const Shape& s, int axis) {
  const int rank = static_cast<int>(s.size());
  const int a = axis < 0 ? axis + rank : axis;
  if (rank == 0 || a < 0 || a >= rank) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for shape " +
                     shape_to_string(s));
  }
  AxisView v;
  for (int i = 0; i < a; ++i) v.outer *= s[i];
  v.len = s[a];
  for (int i = a + 1; i < rank; ++i) v.inner *= s[i];
  return v;
}

template <typename T>
T erf_t(T x) {
  return std::erf(x);
}

}  // namespace

template <typename T>
T gelu_value(T x) {
  return T(0.5) * x * (T(1) + erf_t(x / std::numbers::sqrt2_v<T>));
}

// ---------------------------------------------------------------------------
// Primitives

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  require_rank2("matmul", "a", av.shape());
  require_rank2("matmul", "b", bv.shape());
  const std::size_t m = av.shape()[0], k = av.shape()[1], n = bv.shape()[1];
  if (bv.shape()[0] != k) {
    throw ShapeError("matmul: inner dimensions differ, a " + shape_to_string(av.shape()) + " vs b " +
                     shape_to_string(bv.shape()));
  }
  Tensor<T> out({m, n});
  gemm_nn(m, k, n, av.data().data(), bv.data().data(), out.data().data());
  const auto ia = a.id, ib = b.id;
  return a.tape->record("matmul", std::move(out), {a, b}, [ia, ib, m, k, n](Tape<T>& t, const Tensor<T>& g) {
    if (t.requires_grad(ia)) {
      Tensor<T> ga({m, k});
      gemm_nt(m, n, k, g.data().data(), t.value(ib).data().data(), ga.data().data());
      t.accumulate(ia, ga);
    }
    if (t.requires_grad(ib)) {
      Tensor<T> gb({k, n});
      gemm_tn(m, k, n, t.value(ia).data().data(), g.data().data(), gb.data().data());
      t.accumulate(ib, gb);
    }
  });
}

template <typename T>
Var<T> transpose(Var<T> a) {
  const auto& av = a.value();
  require_rank2("transpose", "a", av.shape());
  const std::size_t r = av.shape()[0], c = av.shape()[1];
  Tensor<T> out({c, r}, transposed(r, c, av.data().data()));
  const auto ia = a.id;
  return a.tape->record("transpose", std::move(out), {a}, [ia, r, c](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(ia, Tensor<T>({r, c}, transposed(c, r, g.data().data())));
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  const bool same = av.shape() == bv.shape();
  const bool row_broadcast = !same && bv.rank() == 1 && av.rank() >= 1 && bv.size() == av.cols();
  if (!same && !row_broadcast) {
    throw ShapeError("add: incompatible shapes a " + shape_to_string(av.shape()) + " and b " +
                     shape_to_string(bv.shape()));
  }
  Tensor<T> out = av;
  auto o = out.data();
  auto bd = bv.data();
  const std::size_t n = bv.size();
  if (same) {
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += bd[i];
  } else {
    for (std::size_t r = 0; r < o.size(); r += n) {
      for (std::size_t j = 0; j < n; ++j) o[r + j] += bd[j];
    }
  }
  const auto ia = a.id, ib = b.id;
  return a.tape->record("add", std::move(out), {a, b}, [ia, ib, same, n](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(ia, g);
    if (!t.requires_grad(ib)) return;
    if (same) {
      t.accumulate(ib, g);
      return;
    }
    auto& slot = t.grad_slot(ib);
    auto s = slot.data();
    auto gd = g.data();
    for (std::size_t r = 0; r < gd.size(); r += n) {
      for (std::size_t j = 0; j < n; ++j) s[j] += gd[r + j];
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.shape() != bv.shape()) {
    throw ShapeError("mul: shapes differ, a " + shape_to_string(av.shape()) + " vs b " +
                     shape_to_string(bv.shape()));
  }
  Tensor<T> out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const auto ia = a.id, ib = b.id;
  return a.tape->record("mul", std::move(out), {a, b}, [ia, ib](Tape<T>& t, const Tensor<T>& g) {
    if (t.requires_grad(ia)) {
      Tensor<T> ga = g;
      const auto& bv = t.value(ib);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= bv[i];
      t.accumulate(ia, ga);
    }
    if (t.requires_grad(ib)) {
      Tensor<T> gb = g;
      const auto& av = t.value(ia);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] *= av[i];
      t.accumulate(ib, gb);
    }
  });
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
  Tensor<T> out = a.value();
  for (auto& x : out.data()) x *= factor;
  const auto ia = a.id;
  return a.tape->record("scale", std::move(out), {a}, [ia, factor](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T> ga = g;
    for (auto& x : ga.data()) x *= factor;
    t.accumulate(ia, ga);
  });
}

template <typename T>
Var<T> gelu(Var<T> x) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v = gelu_value(v);
  const auto ix = x.id;
  return x.tape->record("gelu", std::move(out), {x}, [ix](Tape<T>& t, const Tensor<T>& g) {
    const auto& xv = t.value(ix);
    Tensor<T> gx(xv.shape());
    const T inv_sqrt2pi = T(0.5) * std::numbers::inv_sqrtpi_v<T> * std::numbers::sqrt2_v<T>;
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const T v = xv[i];
      const T cdf = T(0.5) * (T(1) + erf_t(v / std::numbers::sqrt2_v<T>));
      const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
      gx[i] = g[i] * (cdf + v * pdf);
    }
    t.accumulate(ix, gx);
  });
}

template <typename T>
Var<T> softmax(Var<T> x, int axis) {
  const auto& xv = x.value();
  const auto view = axis_view("softmax", xv.shape(), axis);
  Tensor<T> out(xv.shape());
  for (std::size_t o = 0; o < view.outer; ++o) {
    for (std::size_t in = 0; in < view.inner; ++in) {
      const std::size_t base = o * view.len * view.inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < view.len; ++j) mx = std::max(mx, xv[base + j * view.inner]);
      T total = 0;
      for (std::size_t j = 0; j < view.len; ++j) {
        const T e = std::exp(xv[base + j * view.inner] - mx);
        out[base + j * view.inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < view.len; ++j) out[base + j * view.inner] /= total;
    }
  }
  const auto ix = x.id;
  const auto out_id = x.tape->size();
  return x.tape->record("softmax", std::move(out), {x}, [ix, out_id, view](Tape<T>& t, const Tensor<T>& g) {
    const auto& y = t.value(out_id);
    Tensor<T> gx(y.shape());
    for (std::size_t o = 0; o < view.outer; ++o) {
      for (std::size_t in = 0; in < view.inner; ++in) {
        const std::size_t base = o * view.len * view.inner + in;
        T dot = 0;
        for (std::size_t j = 0; j < view.len; ++j) dot += g[base + j * view.inner] * y[base + j * view.inner];
        for (std::size_t j = 0; j < view.len; ++j) {
          const auto idx = base + j * view.inner;
          gx[idx] = y[idx] * (g[idx] - dot);
        }
      }
    }
    t.accumulate(ix, gx);
  });
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
  const auto& xv = x.value();
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  if (xv.rank() == 0) throw ShapeError("layer_norm: operand x must have rank >= 1");
  const std::size_t n = xv.cols();
  const std::size_t rows = xv.size() / n;
  if (gv.rank() != 1 || gv.size() != n || bv.rank() != 1 || bv.size() != n) {
    throw ShapeError("layer_norm: gamma " + shape_to_string(gv.shape()) + " and beta " +
                     shape_to_string(bv.shape()) + " must be [" + std::to_string(n) + "] for x " +
                     shape_to_string(xv.shape()));
  }
  Tensor<T> out(xv.shape());
  auto normed = std::make_shared<std::vector<T>>(xv.size());
  auto rstd = std::make_shared<std::vector<T>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data().data() + r * n;
    T mu = 0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<T>(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(n);
    const T rs = T(1) / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < n; ++j) {
      const T h = (row[j] - mu) * rs;
      (*normed)[r * n + j] = h;
      out[r * n + j] = h * gv[j] + bv[j];
    }
  }
  const auto ix = x.id, ig = gamma.id, ib = beta.id;
  return x.tape->record(
      "layer_norm", std::move(out), {x, gamma, beta},
      [ix, ig, ib, n, rows, normed, rstd](Tape<T>& t, const Tensor<T>& g) {
        const auto& gv = t.value(ig);
        if (t.requires_grad(ig) || t.requires_grad(ib)) {
          Tensor<T> dg({n}), db({n});
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < n; ++j) {
              dg[j] += g[r * n + j] * (*normed)[r * n + j];
              db[j] += g[r * n + j];
            }
          }
          t.accumulate(ig, dg);
          t.accumulate(ib, db);
        }
        if (!t.requires_grad(ix)) return;
        Tensor<T> gx(t.value(ix).shape());
        std::vector<T> dh(n);
        for (std::size_t r = 0; r < rows; ++r) {
          T mean_dh = 0, mean_dh_h = 0;
          for (std::size_t j = 0; j < n; ++j) {
            dh[j] = g[r * n + j] * gv[j];
            mean_dh += dh[j];
            mean_dh_h += dh[j] * (*normed)[r * n + j];
          }
          mean_dh /= static_cast<T>(n);
          mean_dh_h /= static_cast<T>(n);
          const T rs = (*rstd)[r];
          for (std::size_t j = 0; j < n; ++j) {
            gx[r * n + j] = rs * (dh[j] - mean_dh - (*normed)[r * n + j] * mean_dh_h);
          }
        }
        t.accumulate(ix, gx);
      });
}

template <typename T>
Var<T> embedding_lookup(Var<T> table, std::span<const std::int32_t> ids) {
  const auto& tv = table.value();
  require_rank2("embedding_lookup", "table", tv.shape());
  const std::size_t vocab = tv.shape()[0], n = tv.shape()[1];
  Tensor<T> out({ids.size(), n});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw InvalidArgument("embedding_lookup: id " + std::to_string(ids[i]) + " at position " +
                            std::to_string(i) + " outside table of " + std::to_string(vocab) + " rows");
    }
    std::copy_n(tv.data().data() + static_cast<std::size_t>(ids[i]) * n, n, out.data().data() + i * n);
  }
  const auto it = table.id;
  std::vector<std::int32_t> idv(ids.begin(), ids.end());
  return table.tape->record("embedding_lookup", std::move(out), {table},
                            [it, n, idv = std::move(idv)](Tape<T>& t, const Tensor<T>& g) {
                              auto& slot = t.grad_slot(it);
                              for (std::size_t i = 0; i < idv.size(); ++i) {
                                T* dst = slot.data().data() + static_cast<std::size_t>(idv[i]) * n;
                                const T* src = g.data().data() + i * n;
                                for (std::size_t j = 0; j < n; ++j) dst[j] += src[j];
                              }
                            });
}

template <typename T>
Var<T> mean(Var<T> x, int axis) {
  const auto& xv = x.value();
  const auto view = axis_view("mean", xv.shape(), axis);
  Shape out_shape;
  const int rank = static_cast<int>(xv.rank());
  const int a = axis < 0 ? axis + rank : axis;
  for (int i = 0; i < rank; ++i) {
    if (i != a) out_shape.push_back(xv.shape()[i]);
  }
  Tensor<T> out(out_shape);
  const T inv = T(1) / static_cast<T>(view.len);
  for (std::size_t o = 0; o < view.outer; ++o) {
    for (std::size_t j = 0; j < view.len; ++j) {
      for (std::size_t in = 0; in < view.inner; ++in) {
        out[o * view.inner + in] += xv[(o * view.len + j) * view.inner + in];
      }
    }
  }
  for (auto& v : out.data()) v *= inv;
  const auto ix = x.id;
  return x.tape->record("mean", std::move(out), {x}, [ix, view, inv](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T> gx(t.value(ix).shape());
    for (std::size_t o = 0; o < view.outer; ++o) {
      for (std::size_t j = 0; j < view.len; ++j) {
        for (std::size_t in = 0; in < view.inner; ++in) {
          gx[(o * view.len + j) * view.inner + in] = g[o * view.inner + in] * inv;
        }
      }
    }
    t.accumulate(ix, gx);
  });
}

template <typename T>
Var<T> sum(Var<T> x) {
  T total = 0;
  for (auto v : x.value().data()) total += v;
  const auto ix = x.id;
  return x.tape->record("sum", Tensor<T>::scalar(total), {x}, [ix](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(ix, Tensor<T>::filled(t.value(ix).shape(), g[0]));
  });
}

template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const std::int32_t> labels) {
  const auto& lv = logits.value();
  if (lv.rank() < 1 || lv.rank() > 2) {
    throw ShapeError("cross_entropy: logits must be rank 1 or 2, got " + shape_to_string(lv.shape()));
  }
  const std::size_t classes = lv.cols();
  const std::size_t rows = lv.size() / classes;
  if (labels.size() != rows) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                     shape_to_string(lv.shape()));
  }
  if (rows == 0) throw ShapeError("cross_entropy: empty logits");
  auto probs = std::make_shared<std::vector<T>>(lv.size());
  T total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const auto label = labels[r];
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw InvalidArgument("cross_entropy: label " + std::to_string(label) + " outside " +
                            std::to_string(classes) + " classes");
    }
    const T* row = lv.data().data() + r * classes;
    T mx = row[0];
    for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, row[c]);
    T z = 0;
    for (std::size_t c = 0; c < classes; ++c) {
      const T e = std::exp(row[c] - mx);
      (*probs)[r * classes + c] = e;
      z += e;
    }
    for (std::size_t c = 0; c < classes; ++c) (*probs)[r * classes + c] /= z;
    total += -(row[label] - mx - std::log(z));
  }
  const T inv_rows = T(1) / static_cast<T>(rows);
  std::vector<std::int32_t> lab(labels.begin(), labels.end());
  const auto il = logits.id;
  return logits.tape->record(
      "cross_entropy", Tensor<T>::scalar(total * inv_rows), {logits},
      [il, classes, rows, inv_rows, probs, lab = std::move(lab)](Tape<T>& t, const Tensor<T>& g) {
        Tensor<T> gl(t.value(il).shape());
        const T scale = g[0] * inv_rows;
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < classes; ++c) {
            const T indicator = static_cast<std::int32_t>(c) == lab[r] ? T(1) : T(0);
            gl[r * classes + c] = scale * ((*probs)[r * classes + c] - indicator);
          }
        }
        t.accumulate(il, gl);
      });
}

template <typename T>
Var<T> cross_entropy(Var<T> logits, std::int32_t label) {
  const std::int32_t labels[1] = {label};
  return cross_entropy(logits, std::span<const std::int32_t>(labels, 1));
}

template <typename T>
Var<T> segment_mean(Var<T> x, std::span<const Segment> segments) {
  const auto& xv = x.value();
  require_rank2("segment_mean", "x", xv.shape());
  const std::size_t n = xv.shape()[1];
  for (const auto& s : segments) {
    if (s.length == 0 || s.offset + s.length > xv.shape()[0]) {
      throw ShapeError("segment_mean: segment [" + std::to_string(s.offset) + ", +" + std::to_string(s.length) +
                       ") outside x " + shape_to_string(xv.shape()));
    }
  }
  Tensor<T> out({segments.size(), n});
  for (std::size_t s = 0; s < segments.size(); ++s) {
    T* dst = out.data().data() + s * n;
    for (std::size_t r = 0; r < segments[s].length; ++r) {
      const T* src = xv.data().data() + (segments[s].offset + r) * n;
      for (std::size_t j = 0; j < n; ++j) dst[j] += src[j];
    }
    const T inv = T(1) / static_cast<T>(segments[s].length);
    for (std::size_t j = 0; j < n; ++j) dst[j] *= inv;
  }
  const auto ix = x.id;
  std::vector<Segment> segs(segments.begin(), segments.end());
  return x.tape->record("segment_mean", std::move(out), {x},
                        [ix, n, segs = std::move(segs)](Tape<T>& t, const Tensor<T>& g) {
                          auto& slot = t.grad_slot(ix);
                          for (std::size_t s = 0; s < segs.size(); ++s) {
                            const T inv = T(1) / static_cast<T>(segs[s].length);
                            const T* src = g.data().data() + s * n;
                            for (std::size_t r = 0; r < segs[s].length; ++r) {
                              T* dst = slot.data().data() + (segs[s].offset + r) * n;
                              for (std::size_t j = 0; j < n; ++j) dst[j] += src[j] * inv;
                            }
                          }
                        });
}

template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, std::span<const Segment> segments, std::size_t num_heads,
                 std::span<const std::uint8_t> key_valid, std::vector<Tensor<T>>* probs_out) {
  const auto& qv = q.value();
  const auto& kv = k.value();
  const auto& vv = v.value();
  require_rank2("attention", "q", qv.shape());
  if (kv.shape() != qv.shape() || vv.shape() != qv.shape()) {
    throw ShapeError("attention: q " + shape_to_string(qv.shape()) + ", k " + shape_to_string(kv.shape()) +
                     " and v " + shape_to_string(vv.shape()) + " must share a shape");
  }
  const std::size_t rows = qv.shape()[0], hidden = qv.shape()[1];
  if (num_heads == 0 || hidden % num_heads != 0) {
    throw ShapeError("attention: hidden size " + std::to_string(hidden) + " not divisible by " +
                     std::to_string(num_heads) + " heads");
  }
  if (!key_valid.empty() && key_valid.size() != rows) {
    throw ShapeError("attention: key mask has " + std::to_string(key_valid.size()) + " entries for " +
                     std::to_string(rows) + " rows");
  }
  for (const auto& s : segments) {
    if (s.offset + s.length > rows) {
      throw ShapeError("attention: segment [" + std::to_string(s.offset) + ", +" + std::to_string(s.length) +
                       ") outside " + std::to_string(rows) + " rows");
    }
  }
  const std::size_t dh = hidden / num_heads;
  const T inv_scale = T(1) / std::sqrt(static_cast<T>(dh));
  // Probabilities per (segment, head), kept for the backward pass.
  auto probs = std::make_shared<std::vector<std::vector<T>>>();
  probs->reserve(segments.size() * num_heads);
  Tensor<T> out({rows, hidden});
  for (const auto& s : segments) {
    const std::size_t len = s.length;
    for (std::size_t h = 0; h < num_heads; ++h) {
      std::vector<T> p(len * len);
      const std::size_t col = h * dh;
      for (std::size_t i = 0; i < len; ++i) {
        const T* qi = qv.data().data() + (s.offset + i) * hidden + col;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < len; ++j) {
          if (!key_valid.empty() && !key_valid[s.offset + j]) {
            p[i * len + j] = -std::numeric_limits<T>::infinity();
            continue;
          }
          const T* kj = kv.data().data() + (s.offset + j) * hidden + col;
          T dot = 0;
          for (std::size_t d = 0; d < dh; ++d) dot += qi[d] * kj[d];
          p[i * len + j] = dot * inv_scale;
          mx = std::max(mx, p[i * len + j]);
        }
        if (mx == -std::numeric_limits<T>::infinity()) {
          throw InvalidArgument("attention: segment at offset " + std::to_string(s.offset) +
                                " has no valid key positions");
        }
        T total = 0;
        for (std::size_t j = 0; j < len; ++j) {
          const T e = std::exp(p[i * len + j] - mx);
          p[i * len + j] = e;
          total += e;
        }
        for (std::size_t j = 0; j < len; ++j) p[i * len + j] /= total;
        T* oi = out.data().data() + (s.offset + i) * hidden + col;
        for (std::size_t j = 0; j < len; ++j) {
          const T pij = p[i * len + j];
          const T* vj = vv.data().data() + (s.offset + j) * hidden + col;
          for (std::size_t d = 0; d < dh; ++d) oi[d] += pij * vj[d];
        }
      }
      if (probs_out) probs_out->push_back(Tensor<T>({len, len}, p));
      probs->push_back(std::move(p));
    }
  }
  const auto iq = q.id, ik = k.id, iv = v.id;
  std::vector<Segment> segs(segments.begin(), segments.end());
  return q.tape->record(
      "attention", std::move(out), {q, k, v},
      [iq, ik, iv, hidden, num_heads, dh, inv_scale, probs, segs = std::move(segs)](Tape<T>& t,
                                                                                   const Tensor<T>& g) {
        const auto& qv = t.value(iq);
        const auto& kv = t.value(ik);
        const auto& vv = t.value(iv);
        Tensor<T> gq(qv.shape()), gk(kv.shape()), gv(vv.shape());
        std::size_t slot = 0;
        for (const auto& s : segs) {
          const std::size_t len = s.length;
          std::vector<T> dp(len * len);
          for (std::size_t h = 0; h < num_heads; ++h, ++slot) {
            const auto& p = (*probs)[slot];
            const std::size_t col = h * dh;
            // dV = P^T dO ; dP = dO V^T
            for (std::size_t i = 0; i < len; ++i) {
              const T* gi = g.data().data() + (s.offset + i) * hidden + col;
              for (std::size_t j = 0; j < len; ++j) {
                const T pij = p[i * len + j];
                T* gvj = gv.data().data() + (s.offset + j) * hidden + col;
                const T* vj = vv.data().data() + (s.offset + j) * hidden + col;
                T dot = 0;
                for (std::size_t d = 0; d < dh; ++d) {
                  gvj[d] += pij * gi[d];
                  dot += gi[d] * vj[d];
                }
                dp[i * len + j] = dot;
              }
            }
            // dS = P * (dP - rowsum(dP * P)), then dQ = dS K, dK = dS^T Q (scaled).
            for (std::size_t i = 0; i < len; ++i) {
              T row_dot = 0;
              for (std::size_t j = 0; j < len; ++j) row_dot += dp[i * len + j] * p[i * len + j];
              T* gqi = gq.data().data() + (s.offset + i) * hidden + col;
              const T* qi = qv.data().data() + (s.offset + i) * hidden + col;
              for (std::size_t j = 0; j < len; ++j) {
                const T ds = p[i * len + j] * (dp[i * len + j] - row_dot) * inv_scale;
                if (ds == T(0)) continue;
                const T* kj = kv.data().data() + (s.offset + j) * hidden + col;
                T* gkj = gk.data().data() + (s.offset + j) * hidden + col;
                for (std::size_t d = 0; d < dh; ++d) {
                  gqi[d] += ds * kj[d];
                  gkj[d] += ds * qi[d];
                }
              }
            }
          }
        }
        t.accumulate(iq, gq);
        t.accumulate(ik, gk);
        t.accumulate(iv, gv);
      });
}

#define RELAB_INSTANTIATE_OPS(T)                                                                             \
  template Var<T> matmul(Var<T>, Var<T>);                                                                    \
  template Var<T> transpose(Var<T>);                                                                         \
  template Var<T> add(Var<T>, Var<T>);                                                                       \
  template Var<T> mul(Var<T>, Var<T>);                                                                       \
  template Var<T> scale(Var<T>, T);                                                                          \
  template Var<T> gelu(Var<T>);                                                                              \
  template Var<T> softmax(Var<T>, int);                                                                      \
  template Var<T> layer_norm(Var<T>, Var<T>, Var<T>, T);                                                     \
  template Var<T> embedding_lookup(Var<T>, std::span<const std::int32_t>);                                   \
  template Var<T> mean(Var<T>, int);                                                                         \
  template Var<T> sum(Var<T>);                                                                               \
  template Var<T> cross_entropy(Var<T>, std::span<const std::int32_t>);                                      \
  template Var<T> cross_entropy(Var<T>, std::int32_t);                                                       \
  template Var<T> segment_mean(Var<T>, std::span<const Segment>);                                            \
  template Var<T> attention(Var<T>, Var<T>, Var<T>, std::span<const Segment>, std::size_t,                   \
                            std::span<const std::uint8_t>, std::vector<Tensor<T>>*);                         \
  template T gelu_value(T);

RELAB_INSTANTIATE_OPS(float)
RELAB_INSTANTIATE_OPS(double)

#undef RELAB_INSTANTIATE_OPS

}  // namespace relab
