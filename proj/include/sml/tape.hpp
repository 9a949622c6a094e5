#pragma once

#include <Eigen/Core>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "sml/param_store.hpp"
#include "sml/rng.hpp"
#include "sml/tensor.hpp"

namespace sml::diff {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Eigen::Map<const EMat> emap(const Tensor& t) {
  return Eigen::Map<const EMat>(t.data(), t.rows(), t.cols());
}
inline Eigen::Map<EMat> emap(Tensor& t) {
  return Eigen::Map<EMat>(t.data(), t.rows(), t.cols());
}

// Attention mask: 1 = allow, 0 = forbid. Kept as a plain tensor, never a
// differentiable node.
using Mask = Tensor;

// Record of one forward pass. Node ids are creation-ordered, which is a
// topological order; backward walks them once in reverse.
class Tape {
 public:
  using NodeId = int;

  NodeId constant(Tensor t) {
    Node n;
    n.value = std::move(t);
    return push(std::move(n));
  }

  // Differentiable leaf bound to a named parameter. One node per parameter
  // per tape; repeated leases return the cached node.
  NodeId param(const ParamStore& ps, const std::string& name) {
    int pi = ps.index_of(name);
    auto it = param_nodes_.find(pi);
    if (it != param_nodes_.end()) return it->second;
    Node n;
    n.ref = &ps.at(pi);
    n.param_index = pi;
    NodeId id = push(std::move(n));
    param_nodes_[pi] = id;
    return id;
  }

  const Tensor& val(NodeId id) const {
    const Node& n = nodes_[check_id(id)];
    return n.ref ? *n.ref : n.value;
  }

  NodeId add(NodeId a, NodeId b) {
    const Tensor &A = val(a), &B = val(b);
    check_same_shape(A, B, "add");
    Tensor out = A;
    for (long i = 0; i < out.numel(); ++i) out[i] += B[i];
    return push_op(std::move(out), [a, b](Tape& t, const Tensor& g, NodeId) {
      t.accumulate(a, g);
      t.accumulate(b, g);
    });
  }

  // [n,d] + [d] broadcast over rows.
  NodeId add_row(NodeId a, NodeId bias) {
    const Tensor &A = val(a), &B = val(bias);
    if (A.cols() != B.cols() || B.rows() != 1)
      throw std::runtime_error("add_row: shape mismatch " + A.shape_str() + " vs " +
                               B.shape_str());
    Tensor out = A;
    for (long i = 0; i < out.rows(); ++i)
      for (long j = 0; j < out.cols(); ++j) out(i, j) += B[j];
    return push_op(std::move(out), [a, bias](Tape& t, const Tensor& g, NodeId) {
      t.accumulate(a, g);
      Tensor& gb = t.grad_buf(bias);
      for (long i = 0; i < g.rows(); ++i)
        for (long j = 0; j < g.cols(); ++j) gb[j] += g(i, j);
    });
  }

  NodeId scale(NodeId a, double c) {
    Tensor out = val(a);
    for (long i = 0; i < out.numel(); ++i) out[i] *= c;
    return push_op(std::move(out), [a, c](Tape& t, const Tensor& g, NodeId) {
      Tensor& ga = t.grad_buf(a);
      for (long i = 0; i < g.numel(); ++i) ga[i] += c * g[i];
    });
  }

  NodeId matmul(NodeId a, NodeId b, bool trans_a = false, bool trans_b = false) {
    const Tensor &A = val(a), &B = val(b);
    const long m = trans_a ? A.cols() : A.rows();
    const long ka = trans_a ? A.rows() : A.cols();
    const long kb = trans_b ? B.cols() : B.rows();
    const long n = trans_b ? B.rows() : B.cols();
    if (ka != kb)
      throw std::runtime_error("matmul: shape mismatch " + A.shape_str() +
                               (trans_a ? "^T" : "") + " vs " + B.shape_str() +
                               (trans_b ? "^T" : ""));
    Tensor out({m, n});
    auto C = emap(out);
    if (!trans_a && !trans_b)
      C.noalias() = emap(A) * emap(B);
    else if (!trans_a && trans_b)
      C.noalias() = emap(A) * emap(B).transpose();
    else if (trans_a && !trans_b)
      C.noalias() = emap(A).transpose() * emap(B);
    else
      C.noalias() = emap(A).transpose() * emap(B).transpose();
    return push_op(std::move(out), [a, b, trans_a, trans_b](Tape& t, const Tensor& g, NodeId) {
      auto G = emap(g);
      auto A2 = emap(t.val(a));
      auto B2 = emap(t.val(b));
      auto GA = emap(t.grad_buf(a));
      auto GB = emap(t.grad_buf(b));
      if (!trans_a && !trans_b) {
        GA.noalias() += G * B2.transpose();
        GB.noalias() += A2.transpose() * G;
      } else if (!trans_a && trans_b) {
        GA.noalias() += G * B2;
        GB.noalias() += G.transpose() * A2;
      } else if (trans_a && !trans_b) {
        GA.noalias() += B2 * G.transpose();
        GB.noalias() += A2 * G;
      } else {
        GA.noalias() += B2.transpose() * G.transpose();
        GB.noalias() += G.transpose() * A2.transpose();
      }
    });
  }

  NodeId gelu(NodeId a) {
    static constexpr double kInvSqrt2 = 0.70710678118654752440;
    static constexpr double kInvSqrt2Pi = 0.39894228040143267794;
    const Tensor& A = val(a);
    Tensor out = A;
    for (long i = 0; i < out.numel(); ++i) {
      const double x = A[i];
      out[i] = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
    }
    return push_op(std::move(out), [a](Tape& t, const Tensor& g, NodeId) {
      const Tensor& A2 = t.val(a);
      Tensor& ga = t.grad_buf(a);
      for (long i = 0; i < g.numel(); ++i) {
        const double x = A2[i];
        const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
        ga[i] += g[i] * (cdf + x * pdf);
      }
    });
  }

  // Per-row layer normalization with learned gain and bias.
  NodeId layer_norm(NodeId a, NodeId gain, NodeId bias, double ln_eps = 1e-6) {
    const Tensor& A = val(a);
    const long n = A.rows(), d = A.cols();
    if (val(gain).numel() != d || val(bias).numel() != d)
      throw std::runtime_error("layer_norm: gain/bias length mismatch " + A.shape_str());
    Tensor out({n, d});
    auto xhat = std::make_shared<Tensor>(Tensor({n, d}));
    auto inv_sigma = std::make_shared<std::vector<double>>(n);
    const Tensor &G = val(gain), &B = val(bias);
    for (long i = 0; i < n; ++i) {
      double mu = 0.0;
      for (long j = 0; j < d; ++j) mu += A(i, j);
      mu /= d;
      double var = 0.0;
      for (long j = 0; j < d; ++j) {
        const double c = A(i, j) - mu;
        var += c * c;
      }
      var /= d;
      const double is = 1.0 / std::sqrt(var + ln_eps);
      (*inv_sigma)[i] = is;
      for (long j = 0; j < d; ++j) {
        const double xh = (A(i, j) - mu) * is;
        (*xhat)(i, j) = xh;
        out(i, j) = xh * G[j] + B[j];
      }
    }
    return push_op(std::move(out),
                   [a, gain, bias, xhat, inv_sigma](Tape& t, const Tensor& g, NodeId) {
                     const Tensor& G = t.val(gain);
                     const long n = g.rows(), d = g.cols();
                     Tensor& ga = t.grad_buf(a);
                     Tensor& gg = t.grad_buf(gain);
                     Tensor& gb = t.grad_buf(bias);
                     for (long i = 0; i < n; ++i) {
                       double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                       for (long j = 0; j < d; ++j) {
                         const double dxh = g(i, j) * G[j];
                         sum_dxhat += dxh;
                         sum_dxhat_xhat += dxh * (*xhat)(i, j);
                         gg[j] += g(i, j) * (*xhat)(i, j);
                         gb[j] += g(i, j);
                       }
                       const double is = (*inv_sigma)[i];
                       for (long j = 0; j < d; ++j) {
                         const double dxh = g(i, j) * G[j];
                         ga(i, j) += is * (dxh - sum_dxhat / d -
                                           (*xhat)(i, j) * sum_dxhat_xhat / d);
                       }
                     }
                   });
  }

  // Row-wise softmax. Forbidden entries (mask 0) get exactly zero
  // probability; a row with no allowed entries is an error. mask == nullptr
  // means everything is allowed.
  NodeId masked_softmax(NodeId a, const Mask* mask = nullptr) {
    const Tensor& A = val(a);
    if (mask) check_same_shape(A, *mask, "masked_softmax");
    const long n = A.rows(), m = A.cols();
    Tensor out({n, m});
    for (long i = 0; i < n; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (long j = 0; j < m; ++j)
        if (!mask || (*mask)(i, j) != 0.0) mx = std::max(mx, A(i, j));
      if (mx == -std::numeric_limits<double>::infinity())
        throw std::runtime_error("masked_softmax: row " + std::to_string(i) +
                                 " has no allowed entries");
      double z = 0.0;
      for (long j = 0; j < m; ++j) {
        if (!mask || (*mask)(i, j) != 0.0) {
          out(i, j) = std::exp(A(i, j) - mx);
          z += out(i, j);
        } else {
          out(i, j) = 0.0;
        }
      }
      for (long j = 0; j < m; ++j) out(i, j) /= z;
    }
    return push_op(std::move(out), [a](Tape& t, const Tensor& g, NodeId self) {
      const Tensor& P = t.val(self);
      Tensor& ga = t.grad_buf(a);
      const long n = g.rows(), m = g.cols();
      for (long i = 0; i < n; ++i) {
        double dot = 0.0;
        for (long j = 0; j < m; ++j) dot += P(i, j) * g(i, j);
        for (long j = 0; j < m; ++j) ga(i, j) += P(i, j) * (g(i, j) - dot);
      }
    });
  }

  // Rows of an embedding table selected by token id.
  NodeId embedding_gather(NodeId table, std::vector<int> ids) {
    const Tensor& T = val(table);
    const long d = T.cols();
    Tensor out({static_cast<long>(ids.size()), d});
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0 || ids[i] >= T.rows())
        throw std::out_of_range("embedding_gather: id " + std::to_string(ids[i]) +
                                " outside table " + T.shape_str());
      for (long j = 0; j < d; ++j) out(static_cast<long>(i), j) = T(ids[i], j);
    }
    return push_op(std::move(out),
                   [table, ids = std::move(ids)](Tape& t, const Tensor& g, NodeId) {
                     Tensor& gt = t.grad_buf(table);
                     for (std::size_t i = 0; i < ids.size(); ++i)
                       for (long j = 0; j < g.cols(); ++j)
                         gt(ids[i], j) += g(static_cast<long>(i), j);
                   });
  }

  NodeId slice_rows(NodeId a, long r0, long r1) {
    const Tensor& A = val(a);
    if (r0 < 0 || r1 > A.rows() || r0 >= r1)
      throw std::out_of_range("slice_rows: [" + std::to_string(r0) + "," + std::to_string(r1) +
                              ") of " + A.shape_str());
    Tensor out({r1 - r0, A.cols()});
    for (long i = r0; i < r1; ++i)
      for (long j = 0; j < A.cols(); ++j) out(i - r0, j) = A(i, j);
    return push_op(std::move(out), [a, r0](Tape& t, const Tensor& g, NodeId) {
      Tensor& ga = t.grad_buf(a);
      for (long i = 0; i < g.rows(); ++i)
        for (long j = 0; j < g.cols(); ++j) ga(i + r0, j) += g(i, j);
    });
  }

  NodeId slice_cols(NodeId a, long c0, long c1) {
    const Tensor& A = val(a);
    if (c0 < 0 || c1 > A.cols() || c0 >= c1)
      throw std::out_of_range("slice_cols: [" + std::to_string(c0) + "," + std::to_string(c1) +
                              ") of " + A.shape_str());
    Tensor out({A.rows(), c1 - c0});
    for (long i = 0; i < A.rows(); ++i)
      for (long j = c0; j < c1; ++j) out(i, j - c0) = A(i, j);
    return push_op(std::move(out), [a, c0](Tape& t, const Tensor& g, NodeId) {
      Tensor& ga = t.grad_buf(a);
      for (long i = 0; i < g.rows(); ++i)
        for (long j = 0; j < g.cols(); ++j) ga(i, j + c0) += g(i, j);
    });
  }

  NodeId concat_rows(std::span<const NodeId> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
    const long d = val(parts[0]).cols();
    long n = 0;
    for (NodeId p : parts) {
      if (val(p).cols() != d)
        throw std::runtime_error("concat_rows: column mismatch " + val(parts[0]).shape_str() +
                                 " vs " + val(p).shape_str());
      n += val(p).rows();
    }
    Tensor out({n, d});
    long r = 0;
    for (NodeId p : parts) {
      const Tensor& P = val(p);
      for (long i = 0; i < P.rows(); ++i, ++r)
        for (long j = 0; j < d; ++j) out(r, j) = P(i, j);
    }
    std::vector<NodeId> ps(parts.begin(), parts.end());
    return push_op(std::move(out), [ps = std::move(ps)](Tape& t, const Tensor& g, NodeId) {
      long r = 0;
      for (NodeId p : ps) {
        Tensor& gp = t.grad_buf(p);
        for (long i = 0; i < gp.rows(); ++i, ++r)
          for (long j = 0; j < g.cols(); ++j) gp(i, j) += g(r, j);
      }
    });
  }

  NodeId concat_cols(std::span<const NodeId> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
    const long n = val(parts[0]).rows();
    long d = 0;
    for (NodeId p : parts) {
      if (val(p).rows() != n)
        throw std::runtime_error("concat_cols: row mismatch " + val(parts[0]).shape_str() +
                                 " vs " + val(p).shape_str());
      d += val(p).cols();
    }
    Tensor out({n, d});
    long c = 0;
    for (NodeId p : parts) {
      const Tensor& P = val(p);
      for (long i = 0; i < n; ++i)
        for (long j = 0; j < P.cols(); ++j) out(i, c + j) = P(i, j);
      c += P.cols();
    }
    std::vector<NodeId> ps(parts.begin(), parts.end());
    return push_op(std::move(out), [ps = std::move(ps)](Tape& t, const Tensor& g, NodeId) {
      long c = 0;
      for (NodeId p : ps) {
        Tensor& gp = t.grad_buf(p);
        for (long i = 0; i < gp.rows(); ++i)
          for (long j = 0; j < gp.cols(); ++j) gp(i, j) += g(i, c + j);
        c += gp.cols();
      }
    });
  }

  NodeId mean_rows(NodeId a) {
    const Tensor& A = val(a);
    const long n = A.rows(), d = A.cols();
    if (n == 0) throw std::runtime_error("mean_rows: empty input");
    Tensor out({1, d});
    for (long i = 0; i < n; ++i)
      for (long j = 0; j < d; ++j) out(0, j) += A(i, j) / n;
    return push_op(std::move(out), [a, n](Tape& t, const Tensor& g, NodeId) {
      Tensor& ga = t.grad_buf(a);
      for (long i = 0; i < n; ++i)
        for (long j = 0; j < g.cols(); ++j) ga(i, j) += g(0, j) / n;
    });
  }

  // Inverted dropout. The keep mask is drawn at record time, so backward
  // reuses it and repeated forwards differ only through the rng stream.
  NodeId dropout(NodeId a, double rate, Rng& rng) {
    if (rate <= 0.0) return a;
    if (rate >= 1.0) throw std::invalid_argument("dropout: rate must be < 1");
    const Tensor& A = val(a);
    auto mask = std::make_shared<Tensor>(A.shape());
    const double keep = 1.0 - rate;
    Tensor out = A;
    for (long i = 0; i < A.numel(); ++i) {
      (*mask)[i] = rng.uniform() < keep ? 1.0 / keep : 0.0;
      out[i] *= (*mask)[i];
    }
    return push_op(std::move(out), [a, mask](Tape& t, const Tensor& g, NodeId) {
      Tensor& ga = t.grad_buf(a);
      for (long i = 0; i < g.numel(); ++i) ga[i] += g[i] * (*mask)[i];
    });
  }

  // Token-summed cross entropy against the label-smoothed target
  // distribution q = (1-eps)*onehot + eps/V. Returns a scalar node holding
  // the sum over rows.
  NodeId cross_entropy_ls(NodeId logits, std::vector<int> targets, double eps) {
    const Tensor& X = val(logits);
    const long n = X.rows(), v = X.cols();
    if (static_cast<long>(targets.size()) != n)
      throw std::runtime_error("cross_entropy_ls: " + std::to_string(targets.size()) +
                               " targets for logits " + X.shape_str());
    if (eps < 0.0 || eps >= 1.0) throw std::invalid_argument("cross_entropy_ls: eps in [0,1)");
    for (int t : targets)
      if (t < 0 || t >= v)
        throw std::out_of_range("cross_entropy_ls: target " + std::to_string(t) +
                                " outside vocab " + std::to_string(v));
    double total = 0.0;
    for (long i = 0; i < n; ++i) {
      double mx = X(i, 0);
      for (long j = 1; j < v; ++j) mx = std::max(mx, X(i, j));
      double z = 0.0, sum_x = 0.0;
      for (long j = 0; j < v; ++j) {
        z += std::exp(X(i, j) - mx);
        sum_x += X(i, j);
      }
      const double lse = mx + std::log(z);
      total += lse - (1.0 - eps) * X(i, targets[i]) - (eps / v) * sum_x;
    }
    return push_op(Tensor::scalar(total),
                   [logits, targets = std::move(targets), eps](Tape& t, const Tensor& g, NodeId) {
                     const Tensor& X2 = t.val(logits);
                     Tensor& gx = t.grad_buf(logits);
                     const long n = X2.rows(), v = X2.cols();
                     const double gs = g.as_scalar();
                     for (long i = 0; i < n; ++i) {
                       double mx = X2(i, 0);
                       for (long j = 1; j < v; ++j) mx = std::max(mx, X2(i, j));
                       double z = 0.0;
                       for (long j = 0; j < v; ++j) z += std::exp(X2(i, j) - mx);
                       for (long j = 0; j < v; ++j) {
                         const double p = std::exp(X2(i, j) - mx) / z;
                         const double q = (j == targets[i] ? 1.0 - eps : 0.0) + eps / v;
                         gx(i, j) += gs * (p - q);
                       }
                     }
                   });
  }

  // Reverse-mode gradient of a scalar loss in the store's canonical flat
  // order. Nodes recorded after the loss are ignored; parameters the loss
  // never touched keep exact zeros.
  GradVector backward(NodeId loss, const ParamStore& ps) {
    const Tensor& lv = val(loss);
    if (!lv.is_scalar())
      throw std::runtime_error("backward: loss must be scalar, got shape " + lv.shape_str());
    grads_.assign(nodes_.size(), Tensor{});
    grads_[loss] = Tensor::scalar(1.0);
    for (NodeId i = loss; i >= 0; --i) {
      if (grads_[i].numel() == 0) continue;
      if (nodes_[i].backfn) nodes_[i].backfn(*this, grads_[i], i);
    }
    GradVector gv(static_cast<std::size_t>(ps.total_len()));
    for (NodeId i = 0; i <= loss; ++i) {
      const Node& n = nodes_[i];
      if (n.param_index >= 0 && grads_[i].numel() != 0) {
        const long off = ps.offset(n.param_index);
        const Tensor& g = grads_[i];
        for (long k = 0; k < g.numel(); ++k) gv[static_cast<std::size_t>(off + k)] += g[k];
      }
    }
    grads_.clear();
    return gv;
  }

  std::size_t size() const { return nodes_.size(); }

  Tensor& grad_buf(NodeId id) {
    check_id(id);
    if (grads_[id].numel() == 0) grads_[id] = Tensor::zeros(val(id).shape());
    return grads_[id];
  }

 private:
  struct Node {
    Tensor value;
    const Tensor* ref = nullptr;
    int param_index = -1;
    std::function<void(Tape&, const Tensor&, NodeId)> backfn;
  };

  NodeId push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size()) - 1;
  }

  NodeId push_op(Tensor value, std::function<void(Tape&, const Tensor&, NodeId)> backfn) {
    Node n;
    n.value = std::move(value);
    n.backfn = std::move(backfn);
    return push(std::move(n));
  }

  NodeId check_id(NodeId id) const {
    if (id < 0 || id >= static_cast<NodeId>(nodes_.size()))
      throw std::out_of_range("Tape: bad node id " + std::to_string(id));
    return id;
  }

  void accumulate(NodeId id, const Tensor& g) {
    Tensor& buf = grad_buf(id);
    for (long i = 0; i < g.numel(); ++i) buf[i] += g[i];
  }

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  std::map<int, NodeId> param_nodes_;
};

}  // namespace sml::diff
