#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "tabalign/common.hpp"

namespace tabalign {

// Dense row-major matrix. Scalars are 1x1, row vectors 1xN. Storage type is
// a template parameter; tests and the reproducibility contract run at double.
template <typename Real>
struct TensorT {
  int rows = 0;
  int cols = 0;
  std::vector<Real> data;

  TensorT() = default;
  TensorT(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * static_cast<std::size_t>(c), Real(0)) {
    if (r <= 0 || c <= 0) throw ShapeError("tensor dims must be positive, got " + shape_str(r, c));
  }

  static std::string shape_str(int r, int c) {
    return "(" + std::to_string(r) + "x" + std::to_string(c) + ")";
  }
  std::string shape() const { return shape_str(rows, cols); }

  std::size_t numel() const { return data.size(); }

  Real& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  Real at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }

  Real* row_ptr(int r) { return data.data() + static_cast<std::size_t>(r) * cols; }
  const Real* row_ptr(int r) const { return data.data() + static_cast<std::size_t>(r) * cols; }

  void fill(Real v) { std::fill(data.begin(), data.end(), v); }

  bool same_shape(const TensorT& o) const { return rows == o.rows && cols == o.cols; }

  bool all_finite() const {
    for (Real v : data) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }
};

template <typename Real>
struct ParameterT {
  std::string name;
  TensorT<Real> value;
  TensorT<Real> grad;

  ParameterT(std::string n, int r, int c) : name(std::move(n)), value(r, c), grad(r, c) {}

  void zero_grad() { grad.fill(Real(0)); }
};

// Reverse-mode tape. Ops append nodes holding forward values; backward walks
// the nodes in reverse, each closure accumulating into its parents' grads.
// Closures only capture node indices, so tapes stay movable.
template <typename Real>
class Tape {
 public:
  using Tensor = TensorT<Real>;
  using Parameter = ParameterT<Real>;

  struct Node {
    Tensor value;
    Tensor grad;  // allocated during backward
    bool needs_grad = false;
    Parameter* param = nullptr;  // set for leaves bound to a parameter
    std::function<void(Tape&, int)> backward;
  };

  int size() const { return static_cast<int>(nodes_.size()); }
  const Tensor& val(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  Tensor& grad(int id) { return nodes_[static_cast<std::size_t>(id)].grad; }

  // ---- leaves -------------------------------------------------------------

  int param(Parameter& p) {
    Node n;
    n.value = p.value;
    n.needs_grad = true;
    n.param = &p;
    return push(std::move(n));
  }

  int input(Tensor t) {
    Node n;
    n.value = std::move(t);
    n.needs_grad = false;
    return push(std::move(n));
  }

  // ---- primitives ----------------------------------------------------------

  // C = A * B
  int matmul(int a, int b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    if (A.cols != B.rows) throw ShapeError("matmul: " + A.shape() + " x " + B.shape());
    Tensor C(A.rows, B.cols);
    mm_nn(A, B, C);
    return make(std::move(C), {a, b}, [a, b](Tape& t, int self) {
      const Tensor& dC = t.grad(self);
      const Tensor& A2 = t.val(a);
      const Tensor& B2 = t.val(b);
      if (t.wants(a)) acc_mm_nt(dC, B2, t.grad(a));  // dA += dC * B^T
      if (t.wants(b)) acc_mm_tn(A2, dC, t.grad(b));  // dB += A^T * dC
    });
  }

  // C = A * B^T
  int matmul_nt(int a, int b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    if (A.cols != B.cols) throw ShapeError("matmul_nt: " + A.shape() + " x " + B.shape() + "^T");
    Tensor C(A.rows, B.rows);
    mm_nt(A, B, C);
    return make(std::move(C), {a, b}, [a, b](Tape& t, int self) {
      const Tensor& dC = t.grad(self);
      const Tensor& A2 = t.val(a);
      const Tensor& B2 = t.val(b);
      if (t.wants(a)) acc_mm_nn(dC, B2, t.grad(a));  // dA += dC * B
      if (t.wants(b)) acc_mm_tn(dC, A2, t.grad(b));  // dB += dC^T * A
    });
  }

  int add(int a, int b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    if (!A.same_shape(B)) throw ShapeError("add: " + A.shape() + " vs " + B.shape());
    Tensor C = A;
    for (std::size_t i = 0; i < C.data.size(); ++i) C.data[i] += B.data[i];
    return make(std::move(C), {a, b}, [a, b](Tape& t, int self) {
      const Tensor& dC = t.grad(self);
      if (t.wants(a)) acc(t.grad(a), dC);
      if (t.wants(b)) acc(t.grad(b), dC);
    });
  }

  int add_n(const std::vector<int>& xs) {
    if (xs.empty()) throw ShapeError("add_n: empty operand list");
    Tensor C = val(xs[0]);
    for (std::size_t k = 1; k < xs.size(); ++k) {
      const Tensor& X = val(xs[k]);
      if (!C.same_shape(X)) throw ShapeError("add_n: " + C.shape() + " vs " + X.shape());
      for (std::size_t i = 0; i < C.data.size(); ++i) C.data[i] += X.data[i];
    }
    return make(std::move(C), xs, [xs](Tape& t, int self) {
      const Tensor& dC = t.grad(self);
      for (int x : xs) {
        if (t.wants(x)) acc(t.grad(x), dC);
      }
    });
  }

  // A (m x n) plus row vector r (1 x n) broadcast over rows.
  int add_row(int a, int r) {
    const Tensor& A = val(a);
    const Tensor& R = val(r);
    if (R.rows != 1 || R.cols != A.cols) {
      throw ShapeError("add_row: " + A.shape() + " vs " + R.shape());
    }
    Tensor C = A;
    for (int i = 0; i < C.rows; ++i) {
      Real* out = C.row_ptr(i);
      const Real* rv = R.row_ptr(0);
      for (int j = 0; j < C.cols; ++j) out[j] += rv[j];
    }
    return make(std::move(C), {a, r}, [a, r](Tape& t, int self) {
      const Tensor& dC = t.grad(self);
      if (t.wants(a)) acc(t.grad(a), dC);
      if (t.wants(r)) {
        Tensor& dR = t.grad(r);
        for (int i = 0; i < dC.rows; ++i) {
          const Real* g = dC.row_ptr(i);
          Real* out = dR.row_ptr(0);
          for (int j = 0; j < dC.cols; ++j) out[j] += g[j];
        }
      }
    });
  }

  int scale(int a, double c) {
    Tensor C = val(a);
    for (Real& v : C.data) v = static_cast<Real>(v * c);
    return make(std::move(C), {a}, [a, c](Tape& t, int self) {
      if (!t.wants(a)) return;
      const Tensor& dC = t.grad(self);
      Tensor& dA = t.grad(a);
      for (std::size_t i = 0; i < dC.data.size(); ++i) dA.data[i] += static_cast<Real>(dC.data[i] * c);
    });
  }

  int slice_rows(int a, int r0, int r1) {
    const Tensor& A = val(a);
    if (r0 < 0 || r1 > A.rows || r0 >= r1) throw ShapeError("slice_rows: bad range on " + A.shape());
    Tensor C(r1 - r0, A.cols);
    for (int i = r0; i < r1; ++i) {
      std::copy(A.row_ptr(i), A.row_ptr(i) + A.cols, C.row_ptr(i - r0));
    }
    return make(std::move(C), {a}, [a, r0](Tape& t, int self) {
      if (!t.wants(a)) return;
      const Tensor& dC = t.grad(self);
      Tensor& dA = t.grad(a);
      for (int i = 0; i < dC.rows; ++i) {
        const Real* g = dC.row_ptr(i);
        Real* out = dA.row_ptr(i + r0);
        for (int j = 0; j < dC.cols; ++j) out[j] += g[j];
      }
    });
  }

  int slice_cols(int a, int c0, int c1) {
    const Tensor& A = val(a);
    if (c0 < 0 || c1 > A.cols || c0 >= c1) throw ShapeError("slice_cols: bad range on " + A.shape());
    Tensor C(A.rows, c1 - c0);
    for (int i = 0; i < A.rows; ++i) {
      std::copy(A.row_ptr(i) + c0, A.row_ptr(i) + c1, C.row_ptr(i));
    }
    return make(std::move(C), {a}, [a, c0](Tape& t, int self) {
      if (!t.wants(a)) return;
      const Tensor& dC = t.grad(self);
      Tensor& dA = t.grad(a);
      for (int i = 0; i < dC.rows; ++i) {
        const Real* g = dC.row_ptr(i);
        Real* out = dA.row_ptr(i) + c0;
        for (int j = 0; j < dC.cols; ++j) out[j] += g[j];
      }
    });
  }

  int concat_cols(const std::vector<int>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: empty operand list");
    int total = 0;
    const int rows = val(parts[0]).rows;
    for (int p : parts) {
      if (val(p).rows != rows) throw ShapeError("concat_cols: row mismatch");
      total += val(p).cols;
    }
    Tensor C(rows, total);
    int off = 0;
    for (int p : parts) {
      const Tensor& P = val(p);
      for (int i = 0; i < rows; ++i) {
        std::copy(P.row_ptr(i), P.row_ptr(i) + P.cols, C.row_ptr(i) + off);
      }
      off += P.cols;
    }
    return make(std::move(C), parts, [parts](Tape& t, int self) {
      const Tensor& dC = t.grad(self);
      int off2 = 0;
      for (int p : parts) {
        const Tensor& P = t.val(p);
        if (t.wants(p)) {
          Tensor& dP = t.grad(p);
          for (int i = 0; i < dC.rows; ++i) {
            const Real* g = dC.row_ptr(i) + off2;
            Real* out = dP.row_ptr(i);
            for (int j = 0; j < P.cols; ++j) out[j] += g[j];
          }
        }
        off2 += P.cols;
      }
    });
  }

  int concat_rows(const std::vector<int>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: empty operand list");
    int total = 0;
    const int cols = val(parts[0]).cols;
    for (int p : parts) {
      if (val(p).cols != cols) throw ShapeError("concat_rows: col mismatch");
      total += val(p).rows;
    }
    Tensor C(total, cols);
    int off = 0;
    for (int p : parts) {
      const Tensor& P = val(p);
      for (int i = 0; i < P.rows; ++i) {
        std::copy(P.row_ptr(i), P.row_ptr(i) + cols, C.row_ptr(off + i));
      }
      off += P.rows;
    }
    return make(std::move(C), parts, [parts](Tape& t, int self) {
      const Tensor& dC = t.grad(self);
      int off2 = 0;
      for (int p : parts) {
        const Tensor& P = t.val(p);
        if (t.wants(p)) {
          Tensor& dP = t.grad(p);
          for (int i = 0; i < P.rows; ++i) {
            const Real* g = dC.row_ptr(off2 + i);
            Real* out = dP.row_ptr(i);
            for (int j = 0; j < P.cols; ++j) out[j] += g[j];
          }
        }
        off2 += P.rows;
      }
    });
  }

  // Mean of the selected rows of A; output 1 x n.
  int rows_mean(int a, std::vector<int> indices) {
    const Tensor& A = val(a);
    if (indices.empty()) throw ShapeError("rows_mean: empty index set");
    for (int i : indices) {
      if (i < 0 || i >= A.rows) throw ShapeError("rows_mean: index out of range on " + A.shape());
    }
    Tensor C(1, A.cols);
    for (int i : indices) {
      const Real* src = A.row_ptr(i);
      for (int j = 0; j < A.cols; ++j) C.data[static_cast<std::size_t>(j)] += src[j];
    }
    const Real inv = Real(1) / static_cast<Real>(indices.size());
    for (Real& v : C.data) v *= inv;
    return make(std::move(C), {a}, [a, indices, inv](Tape& t, int self) {
      if (!t.wants(a)) return;
      const Tensor& dC = t.grad(self);
      Tensor& dA = t.grad(a);
      for (int i : indices) {
        Real* out = dA.row_ptr(i);
        for (int j = 0; j < dC.cols; ++j) out[j] += dC.data[static_cast<std::size_t>(j)] * inv;
      }
    });
  }

  // Row-wise layer normalization with affine gain/bias (1 x n each).
  int layer_norm(int a, int gamma, int beta, double eps = 1e-5) {
    const Tensor& A = val(a);
    const Tensor& G = val(gamma);
    const Tensor& B = val(beta);
    if (G.rows != 1 || G.cols != A.cols || B.rows != 1 || B.cols != A.cols) {
      throw ShapeError("layer_norm: " + A.shape() + " with gain " + G.shape() + ", bias " + B.shape());
    }
    Tensor C(A.rows, A.cols);
    auto xhat = std::make_shared<Tensor>(A.rows, A.cols);
    auto inv_std = std::make_shared<std::vector<Real>>(static_cast<std::size_t>(A.rows));
    const int n = A.cols;
    for (int i = 0; i < A.rows; ++i) {
      const Real* x = A.row_ptr(i);
      Real mean = 0;
      for (int j = 0; j < n; ++j) mean += x[j];
      mean /= static_cast<Real>(n);
      Real var = 0;
      for (int j = 0; j < n; ++j) {
        const Real d = x[j] - mean;
        var += d * d;
      }
      var /= static_cast<Real>(n);
      const Real istd = Real(1) / std::sqrt(var + static_cast<Real>(eps));
      (*inv_std)[static_cast<std::size_t>(i)] = istd;
      Real* xh = xhat->row_ptr(i);
      Real* out = C.row_ptr(i);
      for (int j = 0; j < n; ++j) {
        xh[j] = (x[j] - mean) * istd;
        out[j] = xh[j] * G.data[static_cast<std::size_t>(j)] + B.data[static_cast<std::size_t>(j)];
      }
    }
    return make(std::move(C), {a, gamma, beta}, [a, gamma, beta, xhat, inv_std](Tape& t, int self) {
      const Tensor& dC = t.grad(self);
      const Tensor& G = t.val(gamma);
      const int n = dC.cols;
      if (t.wants(gamma) || t.wants(beta)) {
        Tensor& dG = t.grad(gamma);
        Tensor& dB = t.grad(beta);
        for (int i = 0; i < dC.rows; ++i) {
          const Real* g = dC.row_ptr(i);
          const Real* xh = xhat->row_ptr(i);
          for (int j = 0; j < n; ++j) {
            if (t.wants(gamma)) dG.data[static_cast<std::size_t>(j)] += g[j] * xh[j];
            if (t.wants(beta)) dB.data[static_cast<std::size_t>(j)] += g[j];
          }
        }
      }
      if (t.wants(a)) {
        Tensor& dA = t.grad(a);
        for (int i = 0; i < dC.rows; ++i) {
          const Real* g = dC.row_ptr(i);
          const Real* xh = xhat->row_ptr(i);
          const Real istd = (*inv_std)[static_cast<std::size_t>(i)];
          Real sum_gy = 0;
          Real sum_gy_xh = 0;
          for (int j = 0; j < n; ++j) {
            const Real gy = g[j] * G.data[static_cast<std::size_t>(j)];
            sum_gy += gy;
            sum_gy_xh += gy * xh[j];
          }
          const Real inv_n = Real(1) / static_cast<Real>(n);
          Real* out = dA.row_ptr(i);
          for (int j = 0; j < n; ++j) {
            const Real gy = g[j] * G.data[static_cast<std::size_t>(j)];
            out[j] += istd * (gy - inv_n * sum_gy - xh[j] * inv_n * sum_gy_xh);
          }
        }
      }
    });
  }

  // Exact erf GELU.
  int gelu(int a) {
    const Tensor& A = val(a);
    Tensor C(A.rows, A.cols);
    for (std::size_t i = 0; i < A.data.size(); ++i) {
      const Real x = A.data[i];
      C.data[i] = static_cast<Real>(0.5) * x *
                  (Real(1) + static_cast<Real>(std::erf(static_cast<double>(x) * 0.7071067811865475244)));
    }
    return make(std::move(C), {a}, [a](Tape& t, int self) {
      if (!t.wants(a)) return;
      const Tensor& dC = t.grad(self);
      const Tensor& A2 = t.val(a);
      Tensor& dA = t.grad(a);
      for (std::size_t i = 0; i < dC.data.size(); ++i) {
        const double x = static_cast<double>(A2.data[i]);
        const double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865475244));
        const double pdf = 0.3989422804014326779 * std::exp(-0.5 * x * x);
        dA.data[i] += dC.data[i] * static_cast<Real>(cdf + x * pdf);
      }
    });
  }

  int softmax_rows(int a) { return softmax_impl(a, -1); }

  // Softmax with probability exactly 0 at masked positions. mask has the same
  // shape as the logits; entries != 0 are kept. Every row needs >= 1 kept
  // position.
  int masked_softmax_rows(int a, const TensorT<Real>& mask) {
    const Tensor& A = val(a);
    if (!A.same_shape(mask)) throw ShapeError("masked_softmax: " + A.shape() + " vs mask " + mask.shape());
    const int mask_id = input(mask);
    return softmax_impl(a, mask_id);
  }

  // Gather rows of an embedding table.
  int embedding(int table, const std::vector<int>& ids) {
    const Tensor& T = val(table);
    if (ids.empty()) throw ShapeError("embedding: empty id list");
    Tensor C(static_cast<int>(ids.size()), T.cols);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0 || ids[i] >= T.rows) {
        throw ShapeError("embedding: id " + std::to_string(ids[i]) + " out of range for table " + T.shape());
      }
      std::copy(T.row_ptr(ids[i]), T.row_ptr(ids[i]) + T.cols, C.row_ptr(static_cast<int>(i)));
    }
    return make(std::move(C), {table}, [table, ids](Tape& t, int self) {
      if (!t.wants(table)) return;
      const Tensor& dC = t.grad(self);
      Tensor& dT = t.grad(table);
      for (std::size_t i = 0; i < ids.size(); ++i) {
        const Real* g = dC.row_ptr(static_cast<int>(i));
        Real* out = dT.row_ptr(ids[i]);
        for (int j = 0; j < dC.cols; ++j) out[j] += g[j];
      }
    });
  }

  // Cross entropy of row `row` of the logits against the target column, with
  // softmax restricted to positions where mask != 0 (empty mask = all kept).
  // Output scalar; gradient is (p - onehot) on kept positions.
  int cross_entropy_row(int logits, int row, int target, const std::vector<std::uint8_t>& mask = {}) {
    const Tensor& A = val(logits);
    if (row < 0 || row >= A.rows) throw ShapeError("cross_entropy: row out of range on " + A.shape());
    if (target < 0 || target >= A.cols) throw ShapeError("cross_entropy: target out of range on " + A.shape());
    if (!mask.empty() && static_cast<int>(mask.size()) != A.cols) {
      throw ShapeError("cross_entropy: mask size " + std::to_string(mask.size()) + " vs cols " +
                       std::to_string(A.cols));
    }
    auto kept = [&](int j) { return mask.empty() || mask[static_cast<std::size_t>(j)] != 0; };
    if (!kept(target)) throw NumericError("cross_entropy: target position is masked");
    const Real* x = A.row_ptr(row);
    double mx = -1e300;
    bool any = false;
    for (int j = 0; j < A.cols; ++j) {
      if (!kept(j)) continue;
      any = true;
      mx = std::max(mx, static_cast<double>(x[j]));
    }
    if (!any) throw NumericError("cross_entropy: all positions masked");
    double z = 0;
    for (int j = 0; j < A.cols; ++j) {
      if (kept(j)) z += std::exp(static_cast<double>(x[j]) - mx);
    }
    const double lse = mx + std::log(z);
    Tensor C(1, 1);
    C.data[0] = static_cast<Real>(lse - static_cast<double>(x[target]));
    return make(std::move(C), {logits}, [logits, row, target, mask, mx, z](Tape& t, int self) {
      if (!t.wants(logits)) return;
      const Real up = t.grad(self).data[0];
      const Tensor& A2 = t.val(logits);
      Tensor& dA = t.grad(logits);
      const Real* x2 = A2.row_ptr(row);
      Real* out = dA.row_ptr(row);
      for (int j = 0; j < A2.cols; ++j) {
        const bool kept_j = mask.empty() || mask[static_cast<std::size_t>(j)] != 0;
        if (!kept_j) continue;
        const double p = std::exp(static_cast<double>(x2[j]) - mx) / z;
        const double indicator = (j == target) ? 1.0 : 0.0;
        out[j] += up * static_cast<Real>(p - indicator);
      }
    });
  }

  // Inverted dropout; identity when rng is null (eval mode).
  int dropout(int a, double p, Rng* rng) {
    if (rng == nullptr || p <= 0.0) return a;
    if (p >= 1.0) throw ConfigError("dropout: rate must be < 1");
    const Tensor& A = val(a);
    auto keep = std::make_shared<std::vector<std::uint8_t>>(A.data.size());
    Tensor C = A;
    const Real scale_up = static_cast<Real>(1.0 / (1.0 - p));
    for (std::size_t i = 0; i < C.data.size(); ++i) {
      const bool k = !rng->bernoulli(p);
      (*keep)[i] = k ? 1 : 0;
      C.data[i] = k ? C.data[i] * scale_up : Real(0);
    }
    return make(std::move(C), {a}, [a, keep, scale_up](Tape& t, int self) {
      if (!t.wants(a)) return;
      const Tensor& dC = t.grad(self);
      Tensor& dA = t.grad(a);
      for (std::size_t i = 0; i < dC.data.size(); ++i) {
        if ((*keep)[i]) dA.data[i] += dC.data[i] * scale_up;
      }
    });
  }

  // ---- backward -------------------------------------------------------------

  // Seeds d(loss)/d(loss) = 1 at `loss` (must be scalar) and accumulates
  // parameter gradients into the bound ParameterT objects.
  void backward(int loss) {
    Node& top = nodes_[static_cast<std::size_t>(loss)];
    if (top.value.numel() != 1) throw ShapeError("backward: loss must be scalar, got " + top.value.shape());
    for (Node& n : nodes_) {
      if (n.needs_grad) {
        n.grad = Tensor(n.value.rows, n.value.cols);
      }
    }
    if (!top.needs_grad) return;  // loss does not depend on any parameter
    top.grad.data[0] = Real(1);
    for (int i = size() - 1; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.needs_grad && n.backward) n.backward(*this, i);
    }
    for (Node& n : nodes_) {
      if (n.param != nullptr) {
        for (std::size_t i = 0; i < n.grad.data.size(); ++i) {
          n.param->grad.data[i] += n.grad.data[i];
        }
      }
    }
  }

  bool wants(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

 private:
  int softmax_impl(int a, int mask_id) {
    const Tensor& A = val(a);
    const Tensor* mask = mask_id >= 0 ? &val(mask_id) : nullptr;
    Tensor C(A.rows, A.cols);
    for (int i = 0; i < A.rows; ++i) {
      const Real* x = A.row_ptr(i);
      double mx = -1e300;
      bool any = false;
      for (int j = 0; j < A.cols; ++j) {
        if (mask && mask->at(i, j) == Real(0)) continue;
        any = true;
        mx = std::max(mx, static_cast<double>(x[j]));
      }
      if (!any) throw NumericError("masked_softmax: row " + std::to_string(i) + " has every position masked");
      double z = 0;
      for (int j = 0; j < A.cols; ++j) {
        if (mask && mask->at(i, j) == Real(0)) continue;
        z += std::exp(static_cast<double>(x[j]) - mx);
      }
      Real* out = C.row_ptr(i);
      for (int j = 0; j < A.cols; ++j) {
        if (mask && mask->at(i, j) == Real(0)) {
          out[j] = Real(0);
        } else {
          out[j] = static_cast<Real>(std::exp(static_cast<double>(x[j]) - mx) / z);
        }
      }
    }
    std::vector<int> parents = mask_id >= 0 ? std::vector<int>{a, mask_id} : std::vector<int>{a};
    return make(std::move(C), parents, [a](Tape& t, int self) {
      if (!t.wants(a)) return;
      const Tensor& P = t.val(self);
      const Tensor& dC = t.grad(self);
      Tensor& dA = t.grad(a);
      for (int i = 0; i < P.rows; ++i) {
        const Real* p = P.row_ptr(i);
        const Real* g = dC.row_ptr(i);
        Real dot = 0;
        for (int j = 0; j < P.cols; ++j) dot += p[j] * g[j];
        Real* out = dA.row_ptr(i);
        // masked positions have p = 0, so they receive no gradient
        for (int j = 0; j < P.cols; ++j) out[j] += p[j] * (g[j] - dot);
      }
    });
  }

  int make(Tensor value, const std::vector<int>& parents, std::function<void(Tape&, int)> backward) {
    Node n;
    n.value = std::move(value);
    for (int p : parents) n.needs_grad = n.needs_grad || nodes_[static_cast<std::size_t>(p)].needs_grad;
    if (n.needs_grad) n.backward = std::move(backward);
    return push(std::move(n));
  }

  int push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  // ---- matmul kernels (accumulating variants used by backward) -------------

  static void mm_nn(const Tensor& A, const Tensor& B, Tensor& C) {
    for (int i = 0; i < A.rows; ++i) {
      const Real* a = A.row_ptr(i);
      Real* c = C.row_ptr(i);
      for (int k = 0; k < A.cols; ++k) {
        const Real aik = a[k];
        const Real* b = B.row_ptr(k);
        for (int j = 0; j < B.cols; ++j) c[j] += aik * b[j];
      }
    }
  }

  static void acc_mm_nn(const Tensor& A, const Tensor& B, Tensor& C) { mm_nn(A, B, C); }

  static void mm_nt(const Tensor& A, const Tensor& B, Tensor& C) {
    for (int i = 0; i < A.rows; ++i) {
      const Real* a = A.row_ptr(i);
      Real* c = C.row_ptr(i);
      for (int j = 0; j < B.rows; ++j) {
        const Real* b = B.row_ptr(j);
        Real s = 0;
        for (int k = 0; k < A.cols; ++k) s += a[k] * b[k];
        c[j] += s;
      }
    }
  }

  static void acc_mm_nt(const Tensor& A, const Tensor& B, Tensor& C) { mm_nt(A, B, C); }

  // C += A^T * B, A (k x m), B (k x n), C (m x n)
  static void acc_mm_tn(const Tensor& A, const Tensor& B, Tensor& C) {
    for (int k = 0; k < A.rows; ++k) {
      const Real* a = A.row_ptr(k);
      const Real* b = B.row_ptr(k);
      for (int i = 0; i < A.cols; ++i) {
        const Real aki = a[i];
        Real* c = C.row_ptr(i);
        for (int j = 0; j < B.cols; ++j) c[j] += aki * b[j];
      }
    }
  }

  static void acc(Tensor& dst, const Tensor& src) {
    for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += src.data[i];
  }

  std::vector<Node> nodes_;
};

}  // namespace tabalign
