#pragma once

// Reverse-mode autodiff over row-major Eigen matrices. The tape is rebuilt
// every step (define-by-run); parameters live outside the tape and collect
// gradients when backward() runs. Templated on the scalar so training can run
// in float while gradient checks and loss oracles run in double.

#include "coral/common.hpp"

#include <cmath>
#include <functional>
#include <memory>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

namespace coral::ad {

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

template <class S>
struct Parameter {
  std::string name;
  Matrix<S> value;
  Matrix<S> grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Matrix<S> v)
      : name(std::move(n)), value(std::move(v)) {
    grad = Matrix<S>::Zero(value.rows(), value.cols());
  }
  void zero_grad() { grad.setZero(); }
  Eigen::Index size() const { return value.size(); }
};

template <class S>
class Tape {
 public:
  using Mat = Matrix<S>;

  const Mat& value(Var v) const { return nodes_[check(v)].value; }
  const Mat& grad(Var v) const { return nodes_[check(v)].grad; }
  S scalar(Var v) const {
    const Mat& m = value(v);
    require(m.rows() == 1 && m.cols() == 1, "scalar(): var is not 1x1");
    return m(0, 0);
  }

  // ---- leaves ----

  Var input(Mat m) { return push(std::move(m), false, {}); }

  Var param(Parameter<S>& p) {
    Var v = push(p.value, true, {});
    param_sinks_.push_back({v.id, &p});
    return v;
  }

  // ---- elementwise / linear algebra ----

  Var matmul(Var a, Var b) {
    const Mat &A = value(a), &B = value(b);
    require(A.cols() == B.rows(), "matmul: inner dims differ");
    Mat C(A.rows(), B.cols());
    C.noalias() = A * B;
    return push(std::move(C), needs(a) || needs(b),
                [a, b](Tape& t, const Mat& g, int) {
                  if (t.needs(a)) t.grad_ref(a).noalias() += g * t.value(b).transpose();
                  if (t.needs(b)) t.grad_ref(b).noalias() += t.value(a).transpose() * g;
                });
  }

  /// A * B^T
  Var matmul_nt(Var a, Var b) {
    const Mat &A = value(a), &B = value(b);
    require(A.cols() == B.cols(), "matmul_nt: inner dims differ");
    Mat C(A.rows(), B.rows());
    C.noalias() = A * B.transpose();
    return push(std::move(C), needs(a) || needs(b),
                [a, b](Tape& t, const Mat& g, int) {
                  if (t.needs(a)) t.grad_ref(a).noalias() += g * t.value(b);
                  if (t.needs(b)) t.grad_ref(b).noalias() += g.transpose() * t.value(a);
                });
  }

  Var add(Var a, Var b) {
    require(value(a).rows() == value(b).rows() && value(a).cols() == value(b).cols(),
            "add: shape mismatch");
    Mat C = value(a) + value(b);
    return push(std::move(C), needs(a) || needs(b),
                [a, b](Tape& t, const Mat& g, int) {
                  if (t.needs(a)) t.grad_ref(a) += g;
                  if (t.needs(b)) t.grad_ref(b) += g;
                });
  }

  Var sub(Var a, Var b) {
    Mat C = value(a) - value(b);
    return push(std::move(C), needs(a) || needs(b),
                [a, b](Tape& t, const Mat& g, int) {
                  if (t.needs(a)) t.grad_ref(a) += g;
                  if (t.needs(b)) t.grad_ref(b) -= g;
                });
  }

  /// Broadcast-add a 1xC row vector to every row.
  Var add_rowvec(Var a, Var v) {
    require(value(v).rows() == 1 && value(v).cols() == value(a).cols(),
            "add_rowvec: v must be 1 x cols(a)");
    Mat C = value(a).rowwise() + value(v).row(0);
    return push(std::move(C), needs(a) || needs(v),
                [a, v](Tape& t, const Mat& g, int) {
                  if (t.needs(a)) t.grad_ref(a) += g;
                  if (t.needs(v)) t.grad_ref(v).row(0) += g.colwise().sum();
                });
  }

  Var scale(Var a, S s) {
    Mat C = value(a) * s;
    return push(std::move(C), needs(a), [a, s](Tape& t, const Mat& g, int) {
      if (t.needs(a)) t.grad_ref(a) += g * s;
    });
  }

  Var gelu(Var a) {
    const S inv_sqrt2 = S(1) / std::sqrt(S(2));
    Mat C = value(a).unaryExpr([inv_sqrt2](S x) {
      return S(0.5) * x * (S(1) + std::erf(x * inv_sqrt2));
    });
    return push(std::move(C), needs(a), [a, inv_sqrt2](Tape& t, const Mat& g, int) {
      if (!t.needs(a)) return;
      const S inv_sqrt2pi = S(1) / std::sqrt(S(2) * std::numbers::pi_v<S>);
      Mat d = t.value(a).unaryExpr([inv_sqrt2, inv_sqrt2pi](S x) {
        return S(0.5) * (S(1) + std::erf(x * inv_sqrt2)) +
               x * inv_sqrt2pi * std::exp(S(-0.5) * x * x);
      });
      t.grad_ref(a).array() += g.array() * d.array();
    });
  }

  Var tanh_act(Var a) {
    Mat C = value(a).array().tanh();
    return push(std::move(C), needs(a), [a](Tape& t, const Mat& g, int self) {
      if (t.needs(a))
        t.grad_ref(a).array() += g.array() * (S(1) - t.nodes_[self].value.array().square());
    });
  }

  Var relu(Var a) {
    Mat C = value(a).cwiseMax(S(0));
    return push(std::move(C), needs(a), [a](Tape& t, const Mat& g, int) {
      if (t.needs(a))
        t.grad_ref(a).array() +=
            g.array() * (t.value(a).array() > S(0)).template cast<S>();
    });
  }

  /// Row-wise layer normalization with learnable gain/bias (1xC each).
  Var layer_norm(Var a, Var gamma, Var beta, S eps = S(1e-5)) {
    const Mat& X = value(a);
    const Eigen::Index C = X.cols();
    require(value(gamma).cols() == C && value(beta).cols() == C,
            "layer_norm: gamma/beta must be 1 x cols(a)");
    auto cache = std::make_shared<std::pair<Mat, Mat>>();  // {xhat, inv_std (Nx1)}
    Mat& xhat = cache->first;
    Mat& inv_std = cache->second;
    xhat.resize(X.rows(), C);
    inv_std.resize(X.rows(), 1);
    for (Eigen::Index r = 0; r < X.rows(); ++r) {
      S mu = X.row(r).mean();
      S var = (X.row(r).array() - mu).square().mean();
      S is = S(1) / std::sqrt(var + eps);
      inv_std(r, 0) = is;
      xhat.row(r) = (X.row(r).array() - mu) * is;
    }
    Mat Y = (xhat.array().rowwise() * value(gamma).row(0).array()).rowwise() +
            value(beta).row(0).array();
    return push(std::move(Y), needs(a) || needs(gamma) || needs(beta),
                [a, gamma, beta, cache](Tape& t, const Mat& g, int) {
                  const Mat& xhat = cache->first;
                  const Mat& inv_std = cache->second;
                  if (t.needs(beta)) t.grad_ref(beta).row(0) += g.colwise().sum();
                  if (t.needs(gamma))
                    t.grad_ref(gamma).row(0) += (g.array() * xhat.array()).colwise().sum().matrix();
                  if (!t.needs(a)) return;
                  const auto gamma_row = t.value(gamma).row(0).array();
                  Mat& da = t.grad_ref(a);
                  const S invC = S(1) / S(xhat.cols());
                  for (Eigen::Index r = 0; r < xhat.rows(); ++r) {
                    auto dxhat = g.row(r).array() * gamma_row;
                    S m1 = dxhat.mean();
                    S m2 = (dxhat * xhat.row(r).array()).sum() * invC;
                    da.row(r).array() +=
                        inv_std(r, 0) * (dxhat - m1 - xhat.row(r).array() * m2);
                  }
                });
  }

  Var softmax_rows(Var a) {
    const Mat& X = value(a);
    Mat Y(X.rows(), X.cols());
    for (Eigen::Index r = 0; r < X.rows(); ++r) {
      auto row = X.row(r).array();
      auto ex = (row - row.maxCoeff()).exp();
      Y.row(r) = ex / ex.sum();
    }
    return push(std::move(Y), needs(a), [a](Tape& t, const Mat& g, int self) {
      if (!t.needs(a)) return;
      const Mat& y = t.nodes_[self].value;
      Mat& da = t.grad_ref(a);
      for (Eigen::Index r = 0; r < y.rows(); ++r) {
        S dot = (g.row(r).array() * y.row(r).array()).sum();
        da.row(r).array() += y.row(r).array() * (g.row(r).array() - dot);
      }
    });
  }

  // ---- structural ops ----

  /// Row-major repack: total size must match. Contiguous, so this is the
  /// (B x T*d) <-> (B*T x d) view change used for token batching.
  Var reshape(Var a, Eigen::Index rows, Eigen::Index cols) {
    const Mat& X = value(a);
    require(X.size() == rows * cols, "reshape: size mismatch");
    Mat Y(rows, cols);
    std::copy(X.data(), X.data() + X.size(), Y.data());
    return push(std::move(Y), needs(a), [a](Tape& t, const Mat& g, int) {
      if (!t.needs(a)) return;
      Mat& da = t.grad_ref(a);
      for (Eigen::Index i = 0; i < g.size(); ++i) da.data()[i] += g.data()[i];
    });
  }

  Var concat_cols(const std::vector<Var>& parts) {
    require(!parts.empty(), "concat_cols: empty");
    Eigen::Index rows = value(parts[0]).rows(), cols = 0;
    for (Var p : parts) {
      require(value(p).rows() == rows, "concat_cols: row mismatch");
      cols += value(p).cols();
    }
    Mat Y(rows, cols);
    Eigen::Index at = 0;
    bool ng = false;
    for (Var p : parts) {
      Y.middleCols(at, value(p).cols()) = value(p);
      at += value(p).cols();
      ng = ng || needs(p);
    }
    auto ps = parts;
    return push(std::move(Y), ng, [ps](Tape& t, const Mat& g, int) {
      Eigen::Index at = 0;
      for (Var p : ps) {
        Eigen::Index w = t.value(p).cols();
        if (t.needs(p)) t.grad_ref(p) += g.middleCols(at, w);
        at += w;
      }
    });
  }

  Var slice_cols(Var a, Eigen::Index c0, Eigen::Index n) {
    require(c0 >= 0 && c0 + n <= value(a).cols(), "slice_cols: out of range");
    Mat Y = value(a).middleCols(c0, n);
    return push(std::move(Y), needs(a), [a, c0, n](Tape& t, const Mat& g, int) {
      if (t.needs(a)) t.grad_ref(a).middleCols(c0, n) += g;
    });
  }

  Var slice_rows(Var a, Eigen::Index r0, Eigen::Index n) {
    require(r0 >= 0 && r0 + n <= value(a).rows(), "slice_rows: out of range");
    Mat Y = value(a).middleRows(r0, n);
    return push(std::move(Y), needs(a), [a, r0, n](Tape& t, const Mat& g, int) {
      if (t.needs(a)) t.grad_ref(a).middleRows(r0, n) += g;
    });
  }

  /// Replicate a 1xC row to N rows.
  Var broadcast_row(Var v, Eigen::Index nrows) {
    require(value(v).rows() == 1, "broadcast_row: expected 1 x C");
    Mat Y = value(v).replicate(nrows, 1);
    return push(std::move(Y), needs(v), [v](Tape& t, const Mat& g, int) {
      if (t.needs(v)) t.grad_ref(v).row(0) += g.colwise().sum();
    });
  }

  /// Repeat a 1xC row k times along columns -> 1 x (k*C).
  Var tile_cols(Var v, int k) {
    require(value(v).rows() == 1, "tile_cols: expected 1 x C");
    Mat Y = value(v).replicate(1, k);
    return push(std::move(Y), needs(v), [v, k](Tape& t, const Mat& g, int) {
      if (!t.needs(v)) return;
      Eigen::Index w = t.value(v).cols();
      for (int i = 0; i < k; ++i) t.grad_ref(v).row(0) += g.middleCols(i * w, w);
    });
  }

  /// Zero token rows: for samples s in [s0, s1), zero rows s*period + l for
  /// every l in token_idx. Used for masking in the (N*L x d) token layout.
  Var zero_token_rows(Var a, int period, std::vector<int> token_idx, int s0, int s1) {
    for (int l : token_idx)
      require(l >= 0 && l < period, "zero_token_rows: token index out of range");
    Mat Y = value(a);
    require((s1) * static_cast<Eigen::Index>(period) <= Y.rows(),
            "zero_token_rows: sample range out of range");
    for (int s = s0; s < s1; ++s)
      for (int l : token_idx) Y.row(static_cast<Eigen::Index>(s) * period + l).setZero();
    auto idx = std::make_shared<std::vector<int>>(std::move(token_idx));
    return push(std::move(Y), needs(a), [a, period, idx, s0, s1](Tape& t, const Mat& g, int) {
      if (!t.needs(a)) return;
      Mat gg = g;
      for (int s = s0; s < s1; ++s)
        for (int l : *idx) gg.row(static_cast<Eigen::Index>(s) * period + l).setZero();
      t.grad_ref(a) += gg;
    });
  }

  /// Like zero_token_rows but writes a learnable 1xd row instead of zeros.
  Var overwrite_token_rows(Var a, Var token, int period, std::vector<int> token_idx,
                           int s0, int s1) {
    require(value(token).rows() == 1 && value(token).cols() == value(a).cols(),
            "overwrite_token_rows: token must be 1 x cols(a)");
    Mat Y = value(a);
    for (int s = s0; s < s1; ++s)
      for (int l : token_idx)
        Y.row(static_cast<Eigen::Index>(s) * period + l) = value(token).row(0);
    auto idx = std::make_shared<std::vector<int>>(std::move(token_idx));
    return push(std::move(Y), needs(a) || needs(token),
                [a, token, period, idx, s0, s1](Tape& t, const Mat& g, int) {
                  if (t.needs(token)) {
                    Mat& dt = t.grad_ref(token);
                    for (int s = s0; s < s1; ++s)
                      for (int l : *idx)
                        dt.row(0) += g.row(static_cast<Eigen::Index>(s) * period + l);
                  }
                  if (t.needs(a)) {
                    Mat gg = g;
                    for (int s = s0; s < s1; ++s)
                      for (int l : *idx)
                        gg.row(static_cast<Eigen::Index>(s) * period + l).setZero();
                    t.grad_ref(a) += gg;
                  }
                });
  }

  // ---- fused attention ----

  /// Multi-head scaled dot-product self-attention. q,k,v are (batch*tokens) x d
  /// with d = heads * head_dim; output has the same shape.
  Var attention(Var q, Var k, Var v, int batch, int tokens, int heads) {
    const Mat &Q = value(q), &K = value(k), &V = value(v);
    const Eigen::Index d = Q.cols();
    require(d % heads == 0, "attention: heads must divide width");
    require(Q.rows() == static_cast<Eigen::Index>(batch) * tokens,
            "attention: rows != batch*tokens");
    const Eigen::Index dh = d / heads;
    const S scale = S(1) / std::sqrt(S(dh));
    auto attn = std::make_shared<std::vector<Mat>>();
    attn->reserve(static_cast<std::size_t>(batch) * heads);
    Mat Y(Q.rows(), d);
    for (int b = 0; b < batch; ++b) {
      const Eigen::Index r0 = static_cast<Eigen::Index>(b) * tokens;
      for (int h = 0; h < heads; ++h) {
        const Eigen::Index c0 = static_cast<Eigen::Index>(h) * dh;
        auto Qh = Q.block(r0, c0, tokens, dh);
        auto Kh = K.block(r0, c0, tokens, dh);
        auto Vh = V.block(r0, c0, tokens, dh);
        Mat s(tokens, tokens);
        s.noalias() = Qh * Kh.transpose();
        s *= scale;
        for (Eigen::Index r = 0; r < s.rows(); ++r) {
          auto row = s.row(r).array();
          auto ex = (row - row.maxCoeff()).exp();
          s.row(r) = ex / ex.sum();
        }
        Y.block(r0, c0, tokens, dh).noalias() = s * Vh;
        attn->push_back(std::move(s));
      }
    }
    return push(std::move(Y), needs(q) || needs(k) || needs(v),
                [q, k, v, batch, tokens, heads, dh, scale, attn](Tape& t, const Mat& g, int) {
                  const Mat &Q = t.value(q), &K = t.value(k), &V = t.value(v);
                  Mat* dQ = t.needs(q) ? &t.grad_ref(q) : nullptr;
                  Mat* dK = t.needs(k) ? &t.grad_ref(k) : nullptr;
                  Mat* dV = t.needs(v) ? &t.grad_ref(v) : nullptr;
                  for (int b = 0; b < batch; ++b) {
                    const Eigen::Index r0 = static_cast<Eigen::Index>(b) * tokens;
                    for (int h = 0; h < heads; ++h) {
                      const Eigen::Index c0 = static_cast<Eigen::Index>(h) * dh;
                      const Mat& A = (*attn)[static_cast<std::size_t>(b) * heads + h];
                      auto gh = g.block(r0, c0, tokens, dh);
                      auto Vh = V.block(r0, c0, tokens, dh);
                      if (dV) dV->block(r0, c0, tokens, dh).noalias() += A.transpose() * gh;
                      if (!dQ && !dK) continue;
                      Mat dA(tokens, tokens);
                      dA.noalias() = gh * Vh.transpose();
                      // softmax backward per row
                      Mat dS(tokens, tokens);
                      for (Eigen::Index r = 0; r < tokens; ++r) {
                        S dot = (dA.row(r).array() * A.row(r).array()).sum();
                        dS.row(r).array() = A.row(r).array() * (dA.row(r).array() - dot);
                      }
                      dS *= scale;
                      if (dQ)
                        dQ->block(r0, c0, tokens, dh).noalias() +=
                            dS * K.block(r0, c0, tokens, dh);
                      if (dK)
                        dK->block(r0, c0, tokens, dh).noalias() +=
                            dS.transpose() * Q.block(r0, c0, tokens, dh);
                    }
                  }
                });
  }

  /// Attention pooling: softmax the per-sample score column over each block of
  /// L rows and return the weighted sum of token rows. tokens: (N*L) x w,
  /// scores: (N*L) x 1 -> N x w.
  Var attn_pool(Var tokens, Var scores, int n_samples, int L) {
    const Mat& T = value(tokens);
    const Mat& Sc = value(scores);
    require(Sc.cols() == 1 && Sc.rows() == T.rows(), "attn_pool: scores must be (N*L) x 1");
    require(T.rows() == static_cast<Eigen::Index>(n_samples) * L, "attn_pool: rows != N*L");
    auto W = std::make_shared<Mat>(n_samples, L);
    Mat Y(n_samples, T.cols());
    for (int b = 0; b < n_samples; ++b) {
      const Eigen::Index r0 = static_cast<Eigen::Index>(b) * L;
      auto s = Sc.col(0).segment(r0, L).array();
      Eigen::Array<S, Eigen::Dynamic, 1> ex = (s - s.maxCoeff()).exp();
      ex /= ex.sum();
      W->row(b) = ex.transpose();
      Y.row(b).noalias() = ex.matrix().transpose() * T.middleRows(r0, L);
    }
    return push(std::move(Y), needs(tokens) || needs(scores),
                [tokens, scores, n_samples, L, W](Tape& t, const Mat& g, int) {
                  const Mat& T = t.value(tokens);
                  for (int b = 0; b < n_samples; ++b) {
                    const Eigen::Index r0 = static_cast<Eigen::Index>(b) * L;
                    auto w = W->row(b).array();
                    if (t.needs(tokens))
                      t.grad_ref(tokens).middleRows(r0, L).noalias() +=
                          W->row(b).transpose() * g.row(b);
                    if (t.needs(scores)) {
                      // d wrt pre-softmax scores
                      Eigen::Array<S, 1, Eigen::Dynamic> a(L);
                      for (int l = 0; l < L; ++l) a(l) = g.row(b).dot(T.row(r0 + l));
                      S dot = (a * w).sum();
                      for (int l = 0; l < L; ++l)
                        t.grad_ref(scores)(r0 + l, 0) += w(l) * (a(l) - dot);
                    }
                  }
                });
  }

  // ---- normalization / losses ----

  /// Rows scaled to unit L2 norm. Throws on a (numerically) zero row, where
  /// the direction is undefined.
  Var l2_normalize_rows(Var a) {
    const Mat& X = value(a);
    auto inv = std::make_shared<Mat>(X.rows(), 1);
    Mat Y(X.rows(), X.cols());
    for (Eigen::Index r = 0; r < X.rows(); ++r) {
      S n = X.row(r).norm();
      if (!std::isfinite(n))
        throw std::domain_error("l2_normalize_rows: non-finite row " + std::to_string(r));
      if (!(n > S(1e-12)))
        throw std::domain_error("l2_normalize_rows: zero-norm row " + std::to_string(r));
      (*inv)(r, 0) = S(1) / n;
      Y.row(r) = X.row(r) * (*inv)(r, 0);
    }
    return push(std::move(Y), needs(a), [a, inv](Tape& t, const Mat& g, int self) {
      if (!t.needs(a)) return;
      const Mat& y = t.nodes_[self].value;
      Mat& da = t.grad_ref(a);
      for (Eigen::Index r = 0; r < y.rows(); ++r) {
        S dot = g.row(r).dot(y.row(r));
        da.row(r) += (g.row(r) - dot * y.row(r)) * (*inv)(r, 0);
      }
    });
  }

  /// Row-wise dot product -> N x 1.
  Var rowwise_dot(Var a, Var b) {
    const Mat &A = value(a), &B = value(b);
    require(A.rows() == B.rows() && A.cols() == B.cols(), "rowwise_dot: shape mismatch");
    Mat Y = (A.array() * B.array()).rowwise().sum();
    return push(std::move(Y), needs(a) || needs(b), [a, b](Tape& t, const Mat& g, int) {
      if (t.needs(a)) t.grad_ref(a) += g.col(0).asDiagonal() * t.value(b);
      if (t.needs(b)) t.grad_ref(b) += g.col(0).asDiagonal() * t.value(a);
    });
  }

  Var mean_all(Var a) {
    Mat Y(1, 1);
    Y(0, 0) = value(a).mean();
    return push(std::move(Y), needs(a), [a](Tape& t, const Mat& g, int) {
      if (t.needs(a)) t.grad_ref(a).array() += g(0, 0) / S(t.value(a).size());
    });
  }

  /// Weighted sum of 1x1 scalars.
  Var add_scaled(const std::vector<std::pair<Var, S>>& terms) {
    require(!terms.empty(), "add_scaled: empty");
    Mat Y = Mat::Zero(1, 1);
    bool ng = false;
    for (auto& [v, w] : terms) {
      Y(0, 0) += w * scalar(v);
      ng = ng || needs(v);
    }
    auto ts = terms;
    return push(std::move(Y), ng, [ts](Tape& t, const Mat& g, int) {
      for (auto& [v, w] : ts)
        if (t.needs(v)) t.grad_ref(v)(0, 0) += w * g(0, 0);
    });
  }

  /// InfoNCE cross-entropy over a logits matrix whose diagonal holds the
  /// positives. Returns the mean anchor loss; when symmetrized, averages the
  /// row (Z -> Z') and column (Z' -> Z) directions.
  Var info_nce_from_logits(Var logits, bool symmetrized) {
    const Mat& L = value(logits);
    const Eigen::Index B = L.rows();
    require(B == L.cols(), "info_nce_from_logits: logits must be square");
    require(B >= 2, "info_nce_from_logits: need batch >= 2 for negatives");
    auto Prow = std::make_shared<Mat>(B, B);
    auto Pcol = std::make_shared<Mat>();
    S loss_row = 0;
    for (Eigen::Index r = 0; r < B; ++r) {
      auto row = L.row(r).array();
      S mx = row.maxCoeff();
      auto ex = (row - mx).exp();
      S sum = ex.sum();
      Prow->row(r) = ex / sum;
      loss_row += mx + std::log(sum) - L(r, r);
    }
    loss_row /= S(B);
    S loss = loss_row;
    if (symmetrized) {
      Pcol->resize(B, B);
      S loss_col = 0;
      for (Eigen::Index c = 0; c < B; ++c) {
        auto col = L.col(c).array();
        S mx = col.maxCoeff();
        auto ex = (col - mx).exp();
        S sum = ex.sum();
        Pcol->col(c) = ex / sum;
        loss_col += mx + std::log(sum) - L(c, c);
      }
      loss_col /= S(B);
      loss = S(0.5) * (loss_row + loss_col);
    }
    Mat Y(1, 1);
    Y(0, 0) = loss;
    return push(std::move(Y), needs(logits),
                [logits, Prow, Pcol, symmetrized, B](Tape& t, const Mat& g, int) {
                  if (!t.needs(logits)) return;
                  const S w = g(0, 0) * (symmetrized ? S(0.5) : S(1)) / S(B);
                  Mat& dl = t.grad_ref(logits);
                  dl += w * (*Prow);
                  if (symmetrized) dl += w * (*Pcol);
                  const S diag = symmetrized ? S(2) : S(1);
                  for (Eigen::Index i = 0; i < B; ++i) dl(i, i) -= w * diag;
                });
  }

  /// Supervised InfoNCE over a logits matrix: positives for anchor k are the
  /// other-view entries sharing its label (always including the paired k).
  /// With exclude_same_class_nonpairs, only the paired view counts as
  /// positive and same-class non-pairs drop out of the denominator too
  /// (neutral by exclusion).
  Var sup_info_nce_from_logits(Var logits, const std::vector<int>& labels,
                               bool exclude_same_class_nonpairs, bool symmetrized) {
    const Mat& L = value(logits);
    const Eigen::Index B = L.rows();
    require(B == L.cols(), "sup_info_nce_from_logits: logits must be square");
    require(static_cast<Eigen::Index>(labels.size()) == B,
            "sup_info_nce_from_logits: label count mismatch");
    {
      bool two = false;
      for (std::size_t i = 1; i < labels.size(); ++i) two = two || labels[i] != labels[0];
      require(two, "sup_info_nce_from_logits: batch must contain >= 2 classes");
    }
    auto lab = std::make_shared<std::vector<int>>(labels);
    // dL[k][j] accumulated per direction
    auto dir_loss = [&](const Mat& S_m, Mat& dacc) -> S {
      S total = 0;
      for (Eigen::Index k = 0; k < B; ++k) {
        std::vector<Eigen::Index> denom, pos;
        for (Eigen::Index j = 0; j < B; ++j) {
          bool same = (*lab)[static_cast<std::size_t>(j)] == (*lab)[static_cast<std::size_t>(k)];
          bool in_denom = !exclude_same_class_nonpairs || !same || j == k;
          if (in_denom) denom.push_back(j);
          if (exclude_same_class_nonpairs ? (j == k) : same) pos.push_back(j);
        }
        S mx = S_m(k, denom[0]);
        for (Eigen::Index j : denom) mx = std::max(mx, S_m(k, j));
        S sum = 0;
        for (Eigen::Index j : denom) sum += std::exp(S_m(k, j) - mx);
        S lse = mx + std::log(sum);
        const S invP = S(1) / S(pos.size());
        for (Eigen::Index p : pos) total += (lse - S_m(k, p)) * invP;
        for (Eigen::Index j : denom)
          dacc(k, j) += std::exp(S_m(k, j) - mx) / sum;
        for (Eigen::Index p : pos) dacc(k, p) -= invP;
      }
      return total / S(B);
    };
    auto drow = std::make_shared<Mat>(Mat::Zero(B, B));
    auto dcol = std::make_shared<Mat>(Mat::Zero(B, B));
    S loss = dir_loss(L, *drow);
    if (symmetrized) {
      Mat Lt = L.transpose();
      Mat dt = Mat::Zero(B, B);
      S loss_col = dir_loss(Lt, dt);
      *dcol = dt.transpose();
      loss = S(0.5) * (loss + loss_col);
    }
    Mat Y(1, 1);
    Y(0, 0) = loss;
    return push(std::move(Y), needs(logits),
                [logits, drow, dcol, symmetrized, B](Tape& t, const Mat& g, int) {
                  if (!t.needs(logits)) return;
                  const S w = g(0, 0) * (symmetrized ? S(0.5) : S(1)) / S(B);
                  t.grad_ref(logits) += w * (*drow);
                  if (symmetrized) t.grad_ref(logits) += w * (*dcol);
                });
  }

  // ---- engine ----

  void backward(Var loss) {
    Node& ln = nodes_[check(loss)];
    require(ln.value.rows() == 1 && ln.value.cols() == 1, "backward: loss must be scalar");
    ensure_grad(loss.id);
    ln.grad(0, 0) = S(1);
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.needs_grad || !n.grad_alloc || !n.backward) continue;
      n.backward(*this, n.grad, i);
    }
    for (auto& [id, p] : param_sinks_) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (n.grad_alloc && p->trainable) p->grad += n.grad;
    }
  }

  std::size_t size() const { return nodes_.size(); }
  bool needs(Var v) const { return nodes_[check(v)].needs_grad; }

  Matrix<S>& grad_ref(Var v) {
    ensure_grad(v.id);
    return nodes_[static_cast<std::size_t>(v.id)].grad;
  }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool needs_grad = false;
    bool grad_alloc = false;
    std::function<void(Tape&, const Mat&, int)> backward;
  };

  std::size_t check(Var v) const {
    require(v.id >= 0 && static_cast<std::size_t>(v.id) < nodes_.size(), "invalid Var");
    return static_cast<std::size_t>(v.id);
  }

  void ensure_grad(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.grad_alloc) {
      n.grad = Mat::Zero(n.value.rows(), n.value.cols());
      n.grad_alloc = true;
    }
  }

  Var push(Mat value, bool needs_grad, std::function<void(Tape&, const Mat&, int)> bw) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    n.backward = std::move(bw);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  std::vector<Node> nodes_;
  std::vector<std::pair<int, Parameter<S>*>> param_sinks_;
};

}  // namespace coral::ad
