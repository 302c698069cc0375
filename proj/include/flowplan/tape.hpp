// Reverse-mode autodiff on a dynamic tape.
//
// Each forward call builds a fresh graph; node values are float32, every
// reduction (matmul, norm statistics, softmax, mse) accumulates in float64.
// A tape is single-threaded; concurrent tapes may share one ParamStore
// read-only, with gradients collected per tape and merged explicitly.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "flowplan/common.hpp"
#include "flowplan/param_store.hpp"
#include "flowplan/tensor.hpp"

namespace flowplan::ad {

using flowplan::GradMap;
using flowplan::ParamStore;
using flowplan::Tensor;

// Deterministic sin/cos embedding of a scalar t, frequencies 10000^(2i/dim)
// for i in [0, dim/2): [sin(f_0 t) .. sin(f_{d/2-1} t), cos(f_0 t) .. ].
inline Tensor sinusoidal_embed(double t, int dim) {
  if (dim <= 0 || dim % 2 != 0) throw ConfigError("sinusoidal_embed: dim must be positive and even");
  Tensor out = Tensor::zeros({1, dim});
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::pow(10000.0, 2.0 * i / dim);
    out.v[i] = static_cast<float>(std::sin(freq * t));
    out.v[half + i] = static_cast<float>(std::cos(freq * t));
  }
  return out;
}

class Tape {
 public:
  using Id = int;

  explicit Tape(const ParamStore* params = nullptr) : params_(params) {}

  // ---- leaves ------------------------------------------------------------

  Id input(Tensor value) {
    Node n;
    n.value = std::move(value);
    n.op = "input";
    return push(std::move(n), /*check=*/false);
  }

  Id param(const std::string& name) {
    if (!params_) throw ConfigError("Tape::param: no ParamStore bound");
    if (!params_->has(name)) throw ConfigError("Tape::param: missing parameter '" + name + "'");
    Node n;
    n.view = &params_->value(name);
    n.op = "param";
    n.pname = name;
    return push(std::move(n), /*check=*/false);
  }

  // ---- elementwise -------------------------------------------------------

  Id add(Id a, Id b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    require_same_shape(A, B, "add");
    Tensor out = A;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] += B.v[i];
    return push_op("add", std::move(out), {a, b}, [](Tape& t, const Node& n) {
      t.accum(n.parents[0], n.grad);
      t.accum(n.parents[1], n.grad);
    });
  }

  Id sub(Id a, Id b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    require_same_shape(A, B, "sub");
    Tensor out = A;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] -= B.v[i];
    return push_op("sub", std::move(out), {a, b}, [](Tape& t, const Node& n) {
      t.accum(n.parents[0], n.grad);
      Tensor neg = n.grad;
      for (auto& x : neg.v) x = -x;
      t.accum(n.parents[1], neg);
    });
  }

  Id mul(Id a, Id b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    require_same_shape(A, B, "mul");
    Tensor out = A;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] *= B.v[i];
    return push_op("mul", std::move(out), {a, b}, [](Tape& t, const Node& n) {
      const Tensor& A = t.val(n.parents[0]);
      const Tensor& B = t.val(n.parents[1]);
      Tensor ga = n.grad, gb = n.grad;
      for (size_t i = 0; i < ga.v.size(); ++i) {
        ga.v[i] *= B.v[i];
        gb.v[i] *= A.v[i];
      }
      t.accum(n.parents[0], ga);
      t.accum(n.parents[1], gb);
    });
  }

  // y = a*x + b with scalar a, b.
  Id affine(Id x, double a, double b) {
    Tensor out = val(x);
    for (auto& v : out.v) v = static_cast<float>(a * v + b);
    return push_op("affine", std::move(out), {x}, [a](Tape& t, const Node& n) {
      Tensor g = n.grad;
      for (auto& v : g.v) v = static_cast<float>(a * v);
      t.accum(n.parents[0], g);
    });
  }

  Id scale(Id x, double a) { return affine(x, a, 0.0); }

  Id relu(Id x) {
    Tensor out = val(x);
    for (auto& v : out.v) v = v > 0.0f ? v : 0.0f;
    return push_op("relu", std::move(out), {x}, [](Tape& t, const Node& n) {
      const Tensor& X = t.val(n.parents[0]);
      Tensor g = n.grad;
      for (size_t i = 0; i < g.v.size(); ++i)
        if (X.v[i] <= 0.0f) g.v[i] = 0.0f;
      t.accum(n.parents[0], g);
    });
  }

  Id gelu(Id x) {
    const Tensor& X = val(x);
    Tensor out = X;
    for (auto& v : out.v) {
      const double z = v;
      v = static_cast<float>(0.5 * z * (1.0 + std::erf(z / std::sqrt(2.0))));
    }
    return push_op("gelu", std::move(out), {x}, [](Tape& t, const Node& n) {
      const Tensor& X = t.val(n.parents[0]);
      Tensor g = n.grad;
      for (size_t i = 0; i < g.v.size(); ++i) {
        const double z = X.v[i];
        const double cdf = 0.5 * (1.0 + std::erf(z / std::sqrt(2.0)));
        const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * kPi);
        g.v[i] = static_cast<float>(g.v[i] * (cdf + z * pdf));
      }
      t.accum(n.parents[0], g);
    });
  }

  // ---- broadcast over rows -------------------------------------------------

  // x: [R,C], v: [1,C] (or [C]); y[i,:] = x[i,:] + v.
  Id add_row(Id x, Id vrow) {
    const Tensor& X = val(x);
    const Tensor& V = val(vrow);
    const auto [rows, cols] = dims2(X, "add_row");
    check_rowvec(V, cols, "add_row");
    Tensor out = X;
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) out.v[static_cast<size_t>(i) * cols + j] += V.v[j];
    return push_op("add_row", std::move(out), {x, vrow}, [](Tape& t, const Node& n) {
      const Tensor& G = n.grad;
      const int rows = t.val(n.parents[0]).shape[0];
      const int cols = static_cast<int>(G.v.size()) / rows;
      t.accum(n.parents[0], G);
      Tensor gv = Tensor::zeros(t.val(n.parents[1]).shape);
      for (int j = 0; j < cols; ++j) {
        double acc = 0.0;
        for (int i = 0; i < rows; ++i) acc += G.v[static_cast<size_t>(i) * cols + j];
        gv.v[j] = static_cast<float>(acc);
      }
      t.accum(n.parents[1], gv);
    });
  }

  // y[i,:] = x[i,:] * v elementwise.
  Id mul_row(Id x, Id vrow) {
    const Tensor& X = val(x);
    const Tensor& V = val(vrow);
    const auto [rows, cols] = dims2(X, "mul_row");
    check_rowvec(V, cols, "mul_row");
    Tensor out = X;
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) out.v[static_cast<size_t>(i) * cols + j] *= V.v[j];
    return push_op("mul_row", std::move(out), {x, vrow}, [](Tape& t, const Node& n) {
      const Tensor& X = t.val(n.parents[0]);
      const Tensor& V = t.val(n.parents[1]);
      const Tensor& G = n.grad;
      const int rows = X.shape[0];
      const int cols = static_cast<int>(G.v.size()) / rows;
      Tensor gx = G;
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) gx.v[static_cast<size_t>(i) * cols + j] *= V.v[j];
      t.accum(n.parents[0], gx);
      Tensor gv = Tensor::zeros(V.shape);
      for (int j = 0; j < cols; ++j) {
        double acc = 0.0;
        for (int i = 0; i < rows; ++i)
          acc += static_cast<double>(G.v[static_cast<size_t>(i) * cols + j]) *
                 X.v[static_cast<size_t>(i) * cols + j];
        gv.v[j] = static_cast<float>(acc);
      }
      t.accum(n.parents[1], gv);
    });
  }

  // ---- linear algebra ------------------------------------------------------

  Id matmul(Id a, Id b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    const auto [m, k] = dims2(A, "matmul lhs");
    const auto [k2, n] = dims2(B, "matmul rhs");
    if (k != k2)
      throw ShapeError("matmul: inner dimensions differ " + A.shape_str() + " vs " + B.shape_str());
    Tensor out = Tensor::zeros({m, n});
    mm_accum(A.v.data(), B.v.data(), out.v.data(), m, k, n);
    return push_op("matmul", std::move(out), {a, b}, [](Tape& t, const Node& n_) {
      const Tensor& A = t.val(n_.parents[0]);
      const Tensor& B = t.val(n_.parents[1]);
      const Tensor& G = n_.grad;
      const int m = A.shape[0], k = A.shape[1], n = B.shape[1];
      // dA[i,k] = sum_j G[i,j] * B[k,j]  (rows of G dotted with rows of B)
      Tensor ga = Tensor::zeros(A.shape);
      for (int i = 0; i < m; ++i) {
        const float* gi = G.v.data() + static_cast<size_t>(i) * n;
        float* gai = ga.v.data() + static_cast<size_t>(i) * k;
        for (int kk = 0; kk < k; ++kk) {
          const float* bk = B.v.data() + static_cast<size_t>(kk) * n;
          double acc = 0.0;
          for (int j = 0; j < n; ++j) acc += static_cast<double>(gi[j]) * bk[j];
          gai[kk] = static_cast<float>(acc);
        }
      }
      t.accum(n_.parents[0], ga);
      // dB[k,j] = sum_i A[i,k] * G[i,j]
      Tensor gb = Tensor::zeros(B.shape);
      std::vector<double> acc(static_cast<size_t>(n));
      for (int kk = 0; kk < k; ++kk) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (int i = 0; i < m; ++i) {
          const double av = A.v[static_cast<size_t>(i) * k + kk];
          const float* gi = G.v.data() + static_cast<size_t>(i) * n;
          for (int j = 0; j < n; ++j) acc[j] += av * gi[j];
        }
        float* gbk = gb.v.data() + static_cast<size_t>(kk) * n;
        for (int j = 0; j < n; ++j) gbk[j] = static_cast<float>(acc[j]);
      }
      t.accum(n_.parents[1], gb);
    });
  }

  Id transpose(Id x) {
    const Tensor& X = val(x);
    const auto [r, c] = dims2(X, "transpose");
    Tensor out = Tensor::zeros({c, r});
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) out.v[static_cast<size_t>(j) * r + i] = X.at(i, j);
    return push_op("transpose", std::move(out), {x}, [](Tape& t, const Node& n) {
      const Tensor& G = n.grad;
      const int c = G.shape[0], r = G.shape[1];
      Tensor gx = Tensor::zeros({r, c});
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) gx.v[static_cast<size_t>(i) * c + j] = G.at(j, i);
      t.accum(n.parents[0], gx);
    });
  }

  // Affine map along the last dimension: y = x W + b, W stored [in, out].
  Id linear(Id x, const std::string& weight_name, const std::string& bias_name) {
    return add_row(matmul(x, param(weight_name)), param(bias_name));
  }

  // ---- normalization / softmax ---------------------------------------------

  // Per-row layer norm without learnable affine (modulation supplies it).
  Id layer_norm(Id x, double eps = 1e-5) {
    const Tensor& X = val(x);
    const auto [rows, cols] = dims2(X, "layer_norm");
    Tensor out = Tensor::zeros(X.shape);
    Tensor inv_std = Tensor::zeros({rows, 1});
    for (int i = 0; i < rows; ++i) {
      const float* xi = X.v.data() + static_cast<size_t>(i) * cols;
      double mean = 0.0;
      for (int j = 0; j < cols; ++j) mean += xi[j];
      mean /= cols;
      double var = 0.0;
      for (int j = 0; j < cols; ++j) {
        const double d = xi[j] - mean;
        var += d * d;
      }
      var /= cols;
      const double istd = 1.0 / std::sqrt(var + eps);
      inv_std.v[i] = static_cast<float>(istd);
      float* oi = out.v.data() + static_cast<size_t>(i) * cols;
      for (int j = 0; j < cols; ++j) oi[j] = static_cast<float>((xi[j] - mean) * istd);
    }
    Tensor saved_out = out;
    return push_op("layer_norm", std::move(out), {x},
                   [saved = std::move(saved_out), istds = std::move(inv_std)](Tape& t, const Node& n) {
                     const int rows = saved.shape[0], cols = saved.shape[1];
                     Tensor gx = Tensor::zeros(saved.shape);
                     for (int i = 0; i < rows; ++i) {
                       const float* yi = saved.v.data() + static_cast<size_t>(i) * cols;
                       const float* gi = n.grad.v.data() + static_cast<size_t>(i) * cols;
                       double gmean = 0.0, gymean = 0.0;
                       for (int j = 0; j < cols; ++j) {
                         gmean += gi[j];
                         gymean += static_cast<double>(gi[j]) * yi[j];
                       }
                       gmean /= cols;
                       gymean /= cols;
                       const double istd = istds.v[i];
                       float* gxi = gx.v.data() + static_cast<size_t>(i) * cols;
                       for (int j = 0; j < cols; ++j)
                         gxi[j] = static_cast<float>(istd * (gi[j] - gmean - yi[j] * gymean));
                     }
                     t.accum(n.parents[0], gx);
                   });
  }

  Id softmax_rows(Id x) {
    const Tensor& X = val(x);
    const auto [rows, cols] = dims2(X, "softmax_rows");
    Tensor out = Tensor::zeros(X.shape);
    for (int i = 0; i < rows; ++i) {
      const float* xi = X.v.data() + static_cast<size_t>(i) * cols;
      float* oi = out.v.data() + static_cast<size_t>(i) * cols;
      double mx = xi[0];
      for (int j = 1; j < cols; ++j) mx = std::max(mx, static_cast<double>(xi[j]));
      double sum = 0.0;
      for (int j = 0; j < cols; ++j) sum += std::exp(xi[j] - mx);
      for (int j = 0; j < cols; ++j) oi[j] = static_cast<float>(std::exp(xi[j] - mx) / sum);
    }
    Tensor saved_out = out;
    return push_op("softmax_rows", std::move(out), {x},
                   [saved = std::move(saved_out)](Tape& t, const Node& n) {
                     const int rows = saved.shape[0], cols = saved.shape[1];
                     Tensor gx = Tensor::zeros(saved.shape);
                     for (int i = 0; i < rows; ++i) {
                       const float* yi = saved.v.data() + static_cast<size_t>(i) * cols;
                       const float* gi = n.grad.v.data() + static_cast<size_t>(i) * cols;
                       double dot = 0.0;
                       for (int j = 0; j < cols; ++j) dot += static_cast<double>(gi[j]) * yi[j];
                       float* gxi = gx.v.data() + static_cast<size_t>(i) * cols;
                       for (int j = 0; j < cols; ++j)
                         gxi[j] = static_cast<float>(yi[j] * (gi[j] - dot));
                     }
                     t.accum(n.parents[0], gx);
                   });
  }

  // ---- shape ops -----------------------------------------------------------

  Id concat_cols(const std::vector<Id>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    int rows = val(parts[0]).rows();
    int cols = 0;
    for (Id p : parts) {
      if (val(p).rows() != rows) throw ShapeError("concat_cols: row mismatch");
      cols += val(p).cols();
    }
    Tensor out = Tensor::zeros({rows, cols});
    int off = 0;
    for (Id p : parts) {
      const Tensor& P = val(p);
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < P.cols(); ++j) out.at(i, off + j) = P.at(i, j);
      off += P.cols();
    }
    Node n;
    n.value = std::move(out);
    n.op = "concat_cols";
    n.parents = parts;
    n.back = [](Tape& t, const Node& n_) {
      const Tensor& G = n_.grad;
      const int rows = G.shape[0];
      int off = 0;
      for (Id p : n_.parents) {
        const Tensor& P = t.val(p);
        Tensor gp = Tensor::zeros(P.shape);
        for (int i = 0; i < rows; ++i)
          for (int j = 0; j < P.cols(); ++j) gp.at(i, j) = G.at(i, off + j);
        t.accum(p, gp);
        off += P.cols();
      }
    };
    return push(std::move(n), /*check=*/true);
  }

  Id slice_cols(Id x, int lo, int hi) {
    const Tensor& X = val(x);
    const auto [rows, cols] = dims2(X, "slice_cols");
    if (lo < 0 || hi > cols || lo >= hi) throw ShapeError("slice_cols: bad range");
    Tensor out = Tensor::zeros({rows, hi - lo});
    for (int i = 0; i < rows; ++i)
      for (int j = lo; j < hi; ++j) out.at(i, j - lo) = X.at(i, j);
    return push_op("slice_cols", std::move(out), {x}, [lo](Tape& t, const Node& n) {
      const Tensor& X = t.val(n.parents[0]);
      const Tensor& G = n.grad;
      Tensor gx = Tensor::zeros(X.shape);
      for (int i = 0; i < G.shape[0]; ++i)
        for (int j = 0; j < G.shape[1]; ++j) gx.at(i, lo + j) = G.at(i, j);
      t.accum(n.parents[0], gx);
    });
  }

  // Max over fixed-size row groups: [G*group, C] -> [G, C]. Ties go to the
  // first row so pooling stays deterministic.
  Id group_max_rows(Id x, int group) {
    const Tensor& X = val(x);
    const auto [rows, cols] = dims2(X, "group_max_rows");
    if (group <= 0 || rows % group != 0) throw ShapeError("group_max_rows: rows not divisible by group");
    const int out_rows = rows / group;
    Tensor out = Tensor::zeros({out_rows, cols});
    std::vector<int> argmax(static_cast<size_t>(out_rows) * cols);
    for (int g = 0; g < out_rows; ++g) {
      for (int j = 0; j < cols; ++j) {
        float best = X.at(g * group, j);
        int bi = g * group;
        for (int r = 1; r < group; ++r) {
          const float v = X.at(g * group + r, j);
          if (v > best) {
            best = v;
            bi = g * group + r;
          }
        }
        out.at(g, j) = best;
        argmax[static_cast<size_t>(g) * cols + j] = bi;
      }
    }
    return push_op("group_max_rows", std::move(out), {x},
                   [am = std::move(argmax)](Tape& t, const Node& n) {
                     const Tensor& X = t.val(n.parents[0]);
                     const Tensor& G = n.grad;
                     const int cols = G.shape[1];
                     Tensor gx = Tensor::zeros(X.shape);
                     for (int g = 0; g < G.shape[0]; ++g)
                       for (int j = 0; j < cols; ++j)
                         gx.at(am[static_cast<size_t>(g) * cols + j], j) += G.at(g, j);
                     t.accum(n.parents[0], gx);
                   });
  }

  Id max_rows(Id x) { return group_max_rows(x, val(x).rows()); }

  // ---- reductions ----------------------------------------------------------

  Id sum(Id x) {
    const Tensor& X = val(x);
    double acc = 0.0;
    for (float v : X.v) acc += v;
    Tensor out({1, 1}, {static_cast<float>(acc)});
    const Id id = push_op("sum", std::move(out), {x}, [](Tape& t, const Node& n) {
      const float g = n.grad.v[0];
      Tensor gx = Tensor::full(t.val(n.parents[0]).shape, g);
      t.accum(n.parents[0], gx);
    });
    node(id).scalar64 = acc;
    return id;
  }

  // Mean squared error over all entries.
  Id mse(Id a, Id b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    require_same_shape(A, B, "mse");
    double acc = 0.0;
    for (size_t i = 0; i < A.v.size(); ++i) {
      const double d = static_cast<double>(A.v[i]) - B.v[i];
      acc += d * d;
    }
    const double n = static_cast<double>(A.v.size());
    Tensor out({1, 1}, {static_cast<float>(acc / n)});
    const Id id = push_op("mse", std::move(out), {a, b}, [](Tape& t, const Node& n_) {
      const Tensor& A = t.val(n_.parents[0]);
      const Tensor& B = t.val(n_.parents[1]);
      const double g = n_.grad.v[0];
      const double scale = 2.0 * g / static_cast<double>(A.v.size());
      Tensor ga = Tensor::zeros(A.shape), gb = Tensor::zeros(B.shape);
      for (size_t i = 0; i < A.v.size(); ++i) {
        const double d = static_cast<double>(A.v[i]) - B.v[i];
        ga.v[i] = static_cast<float>(scale * d);
        gb.v[i] = static_cast<float>(-scale * d);
      }
      t.accum(n_.parents[0], ga);
      t.accum(n_.parents[1], gb);
    });
    node(id).scalar64 = acc / n;
    return id;
  }

  // ---- access / backward ----------------------------------------------------

  const Tensor& val(Id id) const {
    const Node& n = node(id);
    return n.view ? *n.view : n.value;
  }

  // Scalar value of a reduction node before the final float32 round. Keeps
  // finite-difference oracles at the float64 noise floor.
  double scalar(Id id) const {
    const Node& n = node(id);
    if (val(id).size() != 1) throw ShapeError("Tape::scalar: node is not scalar");
    return std::isnan(n.scalar64) ? static_cast<double>(val(id).v[0]) : n.scalar64;
  }

  int size() const { return static_cast<int>(nodes_.size()); }

  // Reverse sweep from `out` seeded with `out_grad`. Parameter gradients land
  // in an internal map (see param_grads / accumulate_into). A second call
  // without new forward work is a state error.
  void backward(Id out, const Tensor& out_grad) {
    if (backward_done_) throw StateError("tape_backward called twice without a new forward");
    const Tensor& o = val(out);
    if (out_grad.shape != o.shape)
      throw ShapeError("backward: output gradient shape " + out_grad.shape_str() +
                       " does not match output " + o.shape_str());
    for (auto& n : nodes_) n.grad = Tensor();
    param_grads_.clear();
    node(out).grad = out_grad;
    for (Id id = out; id >= 0; --id) {
      Node& n = node(id);
      if (n.grad.empty()) continue;
      if (!n.pname.empty()) {
        auto it = param_grads_.find(n.pname);
        if (it == param_grads_.end()) {
          param_grads_.emplace(n.pname, n.grad);
        } else {
          for (size_t i = 0; i < n.grad.v.size(); ++i) it->second.v[i] += n.grad.v[i];
        }
        continue;
      }
      if (n.back) n.back(*this, n);
    }
    backward_done_ = true;
  }

  // Scalar convenience: seed with 1.
  void backward(Id out) {
    if (val(out).size() != 1) throw ShapeError("backward: output is not scalar; pass a seed gradient");
    backward(out, Tensor(val(out).shape, {1.0f}));
  }

  const GradMap& param_grads() const { return param_grads_; }

  void accumulate_into(ParamStore& ps, double scale = 1.0) const { apply_grads(ps, param_grads_, scale); }

  // Gradient w.r.t. an input leaf (zeros if unreached).
  Tensor input_grad(Id id) const {
    const Node& n = node(id);
    if (n.grad.empty()) return Tensor::zeros(val(id).shape);
    return n.grad;
  }

 private:
  struct Node {
    Tensor value;
    const Tensor* view = nullptr;
    Tensor grad;
    std::vector<Id> parents;
    std::function<void(Tape&, const Node&)> back;
    std::string op;
    std::string pname;
    double scalar64 = std::numeric_limits<double>::quiet_NaN();
  };

  Node& node(Id id) { return nodes_.at(static_cast<size_t>(id)); }
  const Node& node(Id id) const { return nodes_.at(static_cast<size_t>(id)); }

  Id push(Node n, bool check) {
    nodes_.push_back(std::move(n));
    const Id id = static_cast<Id>(nodes_.size()) - 1;
    backward_done_ = false;
    if (check) {
      const Tensor& v = val(id);
      if (!v.all_finite())
        throw NumericalError("non-finite output of op '" + nodes_.back().op + "' (node " +
                             std::to_string(id) + ")");
    }
    return id;
  }

  Id push_op(const char* op, Tensor value, std::vector<Id> parents,
             std::function<void(Tape&, const Node&)> back) {
    Node n;
    n.value = std::move(value);
    n.op = op;
    n.parents = std::move(parents);
    n.back = std::move(back);
    return push(std::move(n), /*check=*/true);
  }

  void accum(Id id, const Tensor& g) {
    Node& n = node(id);
    if (n.grad.empty()) {
      n.grad = g;
    } else {
      for (size_t i = 0; i < g.v.size(); ++i) n.grad.v[i] += g.v[i];
    }
  }

  static std::pair<int, int> dims2(const Tensor& t, const char* op) {
    if (t.ndim() != 2) throw ShapeError(std::string(op) + ": expected 2-D tensor, got " + t.shape_str());
    return {t.shape[0], t.shape[1]};
  }

  static void check_rowvec(const Tensor& v, int cols, const char* op) {
    const bool ok = (v.ndim() == 2 && v.shape[0] == 1 && v.shape[1] == cols) ||
                    (v.ndim() == 1 && v.shape[0] == cols);
    if (!ok)
      throw ShapeError(std::string(op) + ": broadcast vector " + v.shape_str() + " does not match " +
                       std::to_string(cols) + " columns");
  }

  // C[m,n] = A[m,k] * B[k,n], float data, double accumulation.
  static void mm_accum(const float* a, const float* b, float* c, int m, int k, int n) {
    std::vector<double> acc(static_cast<size_t>(n));
    for (int i = 0; i < m; ++i) {
      std::fill(acc.begin(), acc.end(), 0.0);
      const float* ai = a + static_cast<size_t>(i) * k;
      for (int kk = 0; kk < k; ++kk) {
        const double av = ai[kk];
        const float* bk = b + static_cast<size_t>(kk) * n;
        for (int j = 0; j < n; ++j) acc[j] += av * bk[j];
      }
      float* ci = c + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) ci[j] = static_cast<float>(acc[j]);
    }
  }

  const ParamStore* params_;
  std::vector<Node> nodes_;
  GradMap param_grads_;
  bool backward_done_ = false;
};

// ---- composite layers -------------------------------------------------------

// Scaled dot-product self-attention over the row (token) axis.
// Parameters under `prefix`: wq/bq, wk/bk, wv/bv, wo/bo with W stored [D, D].
inline Tape::Id multi_head_attention(Tape& t, Tape::Id tokens, int heads, const std::string& prefix) {
  const int d = t.val(tokens).cols();
  if (heads <= 0 || d % heads != 0)
    throw ConfigError("multi_head_attention: token dim " + std::to_string(d) +
                      " not divisible by heads " + std::to_string(heads));
  const int dh = d / heads;
  const Tape::Id q = t.linear(tokens, prefix + ".wq", prefix + ".bq");
  const Tape::Id k = t.linear(tokens, prefix + ".wk", prefix + ".bk");
  const Tape::Id v = t.linear(tokens, prefix + ".wv", prefix + ".bv");
  std::vector<Tape::Id> head_outs;
  head_outs.reserve(static_cast<size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    const Tape::Id qh = t.slice_cols(q, h * dh, (h + 1) * dh);
    const Tape::Id kh = t.slice_cols(k, h * dh, (h + 1) * dh);
    const Tape::Id vh = t.slice_cols(v, h * dh, (h + 1) * dh);
    const Tape::Id scores = t.scale(t.matmul(qh, t.transpose(kh)), 1.0 / std::sqrt(double(dh)));
    const Tape::Id probs = t.softmax_rows(scores);
    head_outs.push_back(t.matmul(probs, vh));
  }
  const Tape::Id merged = heads == 1 ? head_outs[0] : t.concat_cols(head_outs);
  return t.linear(merged, prefix + ".wo", prefix + ".bo");
}

// Scale/shift/gate vectors for one modulated sub-layer, regressed from the
// condition embedding. Zero-initialized regressors make gamma=beta=alpha=0.
struct Modulation {
  Tape::Id gamma, beta, alpha;
};

inline Modulation regress_modulation(Tape& t, Tape::Id cond, int dim, const std::string& prefix) {
  const Tape::Id packed = t.linear(cond, prefix + ".w", prefix + ".b");  // [1, 3*dim]
  if (t.val(packed).cols() != 3 * dim)
    throw ConfigError("regress_modulation: regressor '" + prefix + "' does not produce 3*dim outputs");
  return Modulation{t.slice_cols(packed, 0, dim), t.slice_cols(packed, dim, 2 * dim),
                    t.slice_cols(packed, 2 * dim, 3 * dim)};
}

// h + alpha .* SubLayer( LN(h) .* (1 + gamma) + beta )
inline Tape::Id modulated_residual(Tape& t, Tape::Id h, const Modulation& m,
                                   const std::function<Tape::Id(Tape&, Tape::Id)>& sublayer) {
  const Tape::Id normed = t.layer_norm(h);
  const Tape::Id scaled = t.add_row(t.mul_row(normed, t.affine(m.gamma, 1.0, 1.0)), m.beta);
  const Tape::Id s = sublayer(t, scaled);
  return t.add(h, t.mul_row(s, m.alpha));
}

// Pre-norm transformer block (attention + feed-forward), each sub-layer
// AdaLN-modulated from `cond`. Parameters under `prefix`:
//   .attn_mod.{w,b}, .attn.{wq,bq,wk,bk,wv,bv,wo,bo},
//   .ffn_mod.{w,b},  .ffn.{w1,b1,w2,b2}
inline Tape::Id adaln_block(Tape& t, Tape::Id tokens, Tape::Id cond, int heads,
                            const std::string& prefix) {
  const int d = t.val(tokens).cols();
  const Modulation am = regress_modulation(t, cond, d, prefix + ".attn_mod");
  const Tape::Id h1 = modulated_residual(t, tokens, am, [&](Tape& tp, Tape::Id x) {
    return multi_head_attention(tp, x, heads, prefix + ".attn");
  });
  const Modulation fm = regress_modulation(t, cond, d, prefix + ".ffn_mod");
  return modulated_residual(t, h1, fm, [&](Tape& tp, Tape::Id x) {
    const Tape::Id hidden = tp.gelu(tp.linear(x, prefix + ".ffn.w1", prefix + ".ffn.b1"));
    return tp.linear(hidden, prefix + ".ffn.w2", prefix + ".ffn.b2");
  });
}

}  // namespace flowplan::ad
