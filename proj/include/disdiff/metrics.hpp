#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "disdiff/data.hpp"
#include "disdiff/random.hpp"
#include "disdiff/tensor.hpp"

namespace disdiff {

// ---- PCA post-processing ---------------------------------------------------

struct PcaResult {
  Tensor<double> matrix;  // [n_samples, n_slots * components_kept]
  std::vector<std::string> warnings;
};

/// Fit PCA independently on each factor slot of a [n, N, d] representation
/// set, keep the top `components_kept` directions per slot, concatenate.
/// Zero-variance slots produce zero columns and a warning.
inline PcaResult pca_postprocess(const Tensor<double>& reps,
                                 int components_kept) {
  if (reps.ndim() != 3)
    throw std::invalid_argument("pca_postprocess: expected [n, slots, dim]");
  int n = reps.dim(0), N = reps.dim(1), d = reps.dim(2);
  if (n < 2) throw std::invalid_argument("pca_postprocess: need >= 2 samples");
  if (components_kept < 1 || components_kept > d)
    throw std::invalid_argument("pca_postprocess: bad components_kept");
  PcaResult out;
  out.matrix = Tensor<double>::zeros({n, N * components_kept});
  for (int s = 0; s < N; ++s) {
    Eigen::MatrixXd X(n, d);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) X(i, j) = reps[(i * N + s) * d + j];
    Eigen::RowVectorXd mean = X.colwise().mean();
    X.rowwise() -= mean;
    Eigen::MatrixXd cov = X.transpose() * X / double(n - 1);
    if (cov.norm() < 1e-12) {
      out.warnings.push_back("slot " + std::to_string(s) +
                             " has zero variance; emitting zero columns");
      continue;
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    // eigenvalues ascending; take the top components_kept
    for (int c = 0; c < components_kept; ++c) {
      Eigen::VectorXd v = eig.eigenvectors().col(d - 1 - c);
      // deterministic sign: largest-magnitude coefficient positive
      int argmax = 0;
      for (int j = 1; j < d; ++j)
        if (std::abs(v[j]) > std::abs(v[argmax])) argmax = j;
      if (v[argmax] < 0) v = -v;
      Eigen::VectorXd proj = X * v;
      for (int i = 0; i < n; ++i)
        out.matrix[i * N * components_kept + s * components_kept + c] = proj[i];
    }
  }
  return out;
}

// ---- FactorVAE score -------------------------------------------------------

struct FactorVaeOptions {
  int samples_per_vote = 64;
  int train_votes = 800;
  int eval_votes = 200;
};

/// Majority-vote classifier accuracy over (argmin-variance-dimension, fixed
/// factor) votes. `reps` has one row per dataset sample, aligned with the
/// dataset's label order.
inline double factor_vae_score(const Tensor<double>& reps,
                               const FactorDataset& ds,
                               const FactorVaeOptions& opt, Rng& rng) {
  int N = ds.n_factors();
  if (N < 2)
    throw std::invalid_argument("factor_vae_score: need >= 2 factors");
  if (opt.train_votes + opt.eval_votes < 100)
    throw std::invalid_argument("factor_vae_score: need >= 100 votes");
  if (reps.dim(0) != static_cast<int>(ds.count()))
    throw std::invalid_argument("factor_vae_score: reps/dataset mismatch");
  int D = reps.dim(1);

  // global per-dimension std for normalization; (near-)collapsed dimensions
  // are excluded from the argmin
  std::vector<double> sd(D, 0.0), mean(D, 0.0);
  std::int64_t n = reps.dim(0);
  for (std::int64_t i = 0; i < n; ++i)
    for (int j = 0; j < D; ++j) mean[j] += reps[i * D + j];
  for (auto& m : mean) m /= double(n);
  for (std::int64_t i = 0; i < n; ++i)
    for (int j = 0; j < D; ++j) {
      double e = reps[i * D + j] - mean[j];
      sd[j] += e * e;
    }
  std::vector<bool> active(D);
  for (int j = 0; j < D; ++j) {
    sd[j] = std::sqrt(sd[j] / double(n));
    active[j] = sd[j] > 1e-9;
  }
  if (std::none_of(active.begin(), active.end(), [](bool a) { return a; }))
    return 1.0 / N;  // fully collapsed representation carries no signal

  auto cast_vote = [&](int k) {
    int fixed = static_cast<int>(rng.uniform_int(ds.spec[k].cardinality));
    std::vector<double> m(D, 0.0), v(D, 0.0);
    std::vector<int> row(N);
    for (int s = 0; s < opt.samples_per_vote; ++s) {
      for (int f = 0; f < N; ++f)
        row[f] = f == k ? fixed
                        : static_cast<int>(rng.uniform_int(ds.spec[f].cardinality));
      std::int64_t idx = ds.index_of(row);
      for (int j = 0; j < D; ++j) {
        double x = reps[idx * D + j] / sd[j];
        m[j] += x;
        v[j] += x * x;
      }
    }
    int best = -1;
    double best_v = 0;
    for (int j = 0; j < D; ++j) {
      if (!active[j]) continue;
      double mm = m[j] / opt.samples_per_vote;
      double var = v[j] / opt.samples_per_vote - mm * mm;
      if (best < 0 || var < best_v) {
        best = j;
        best_v = var;
      }
    }
    return best;
  };

  // training pass: counts[dim][factor]
  std::vector<std::vector<int>> counts(D, std::vector<int>(N, 0));
  for (int t = 0; t < opt.train_votes; ++t) {
    int k = static_cast<int>(rng.uniform_int(N));
    counts[cast_vote(k)][k]++;
  }
  std::vector<int> classifier(D, 0);
  for (int j = 0; j < D; ++j)
    classifier[j] = static_cast<int>(
        std::max_element(counts[j].begin(), counts[j].end()) -
        counts[j].begin());

  int correct = 0;
  for (int t = 0; t < opt.eval_votes; ++t) {
    int k = static_cast<int>(rng.uniform_int(N));
    if (classifier[cast_vote(k)] == k) correct++;
  }
  return static_cast<double>(correct) / opt.eval_votes;
}

// ---- DCI disentanglement ---------------------------------------------------

struct DciOptions {
  std::string predictor = "lasso";  // or "stumps"
  double lasso_alpha = 0.01;
  int lasso_iters = 200;
  int stump_rounds = 40;
  double stump_lr = 0.2;
  // factors whose predictor scores below this R^2 on a held-out split carry
  // no usable signal; their importance column is zeroed
  double min_r2 = 0.1;
};

struct DciResult {
  double disentanglement = 0.0;
  Tensor<double> importance;  // [D, n_factors]
  std::vector<std::string> warnings;
};

namespace detail {

/// Lasso by cyclic coordinate descent on standardized inputs/targets.
inline std::vector<double> lasso_fit(const Eigen::MatrixXd& X,
                                     const Eigen::VectorXd& y, double alpha,
                                     int iters) {
  int n = static_cast<int>(X.rows()), D = static_cast<int>(X.cols());
  std::vector<double> w(D, 0.0);
  Eigen::VectorXd resid = y;
  std::vector<double> col_sq(D);
  for (int j = 0; j < D; ++j) col_sq[j] = X.col(j).squaredNorm() / n;
  for (int it = 0; it < iters; ++it) {
    double max_delta = 0;
    for (int j = 0; j < D; ++j) {
      if (col_sq[j] < 1e-12) continue;
      double rho = X.col(j).dot(resid) / n + col_sq[j] * w[j];
      double wj = 0;
      if (rho > alpha)
        wj = (rho - alpha) / col_sq[j];
      else if (rho < -alpha)
        wj = (rho + alpha) / col_sq[j];
      double delta = wj - w[j];
      if (delta != 0) {
        resid -= delta * X.col(j);
        w[j] = wj;
        max_delta = std::max(max_delta, std::abs(delta));
      }
    }
    if (max_delta < 1e-10) break;
  }
  return w;
}

/// Gradient-boosted depth-1 stumps; returns per-feature importance
/// (total squared-error reduction). If eval inputs are given, the boosted
/// model's predictions on them are accumulated into *eval_pred.
inline std::vector<double> stump_importance(const Eigen::MatrixXd& X,
                                            const Eigen::VectorXd& y,
                                            int rounds, double lr,
                                            const Eigen::MatrixXd* X_eval = nullptr,
                                            Eigen::VectorXd* eval_pred = nullptr) {
  int n = static_cast<int>(X.rows()), D = static_cast<int>(X.cols());
  std::vector<double> imp(D, 0.0);
  Eigen::VectorXd resid = y;
  if (eval_pred) eval_pred->setZero(X_eval->rows());
  for (int r = 0; r < rounds; ++r) {
    int best_j = -1;
    double best_gain = 0, best_thr = 0, best_lo = 0, best_hi = 0;
    double base = resid.squaredNorm();
    for (int j = 0; j < D; ++j) {
      std::vector<int> order(n);
      std::iota(order.begin(), order.end(), 0);
      std::sort(order.begin(), order.end(),
                [&](int a, int b) { return X(a, j) < X(b, j); });
      double sum_lo = 0, sum_all = resid.sum();
      for (int i = 0; i + 1 < n; ++i) {
        sum_lo += resid[order[i]];
        if (X(order[i], j) == X(order[i + 1], j)) continue;
        int n_lo = i + 1, n_hi = n - n_lo;
        double mu_lo = sum_lo / n_lo, mu_hi = (sum_all - sum_lo) / n_hi;
        double gain = n_lo * mu_lo * mu_lo + n_hi * mu_hi * mu_hi;
        if (gain > best_gain) {
          best_gain = gain;
          best_j = j;
          best_thr = 0.5 * (X(order[i], j) + X(order[i + 1], j));
          best_lo = mu_lo;
          best_hi = mu_hi;
        }
      }
    }
    if (best_j < 0 || best_gain < 1e-12 * std::max(base, 1.0)) break;
    for (int i = 0; i < n; ++i)
      resid[i] -= lr * (X(i, best_j) <= best_thr ? best_lo : best_hi);
    if (eval_pred)
      for (int i = 0; i < X_eval->rows(); ++i)
        (*eval_pred)[i] +=
            lr * ((*X_eval)(i, best_j) <= best_thr ? best_lo : best_hi);
    imp[best_j] += best_gain;
  }
  return imp;
}

inline double entropy_nats(const std::vector<double>& p) {
  double h = 0;
  for (double v : p)
    if (v > 0) h -= v * std::log(v);
  return h;
}

}  // namespace detail

inline DciResult dci_disentanglement(const Tensor<double>& reps,
                                     const FactorDataset& ds,
                                     const DciOptions& opt = {}) {
  if (reps.dim(0) != static_cast<int>(ds.count()))
    throw std::invalid_argument("dci: reps/dataset mismatch");
  int n = reps.dim(0), D = reps.dim(1), N = ds.n_factors();

  // standardize columns
  Eigen::MatrixXd X(n, D);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < D; ++j) X(i, j) = reps[i * D + j];
  for (int j = 0; j < D; ++j) {
    double mu = X.col(j).mean();
    X.col(j).array() -= mu;
    double s = std::sqrt(X.col(j).squaredNorm() / n);
    if (s > 1e-12) X.col(j) /= s;
  }

  if (opt.predictor != "lasso" && opt.predictor != "stumps")
    throw std::invalid_argument("dci: unknown predictor '" + opt.predictor +
                                "'");

  // deterministic even/odd split for the held-out signal check
  int n_tr = (n + 1) / 2, n_ev = n / 2;
  Eigen::MatrixXd X_tr(n_tr, D), X_ev(n_ev, D);
  for (int i = 0; i < n; ++i)
    (i % 2 == 0 ? X_tr.row(i / 2) : X_ev.row(i / 2)) = X.row(i);

  DciResult out;
  out.importance = Tensor<double>::zeros({D, N});
  for (int f = 0; f < N; ++f) {
    Eigen::VectorXd y(n);
    for (int i = 0; i < n; ++i) y[i] = ds.label(i, f);
    double mu = y.mean();
    y.array() -= mu;
    double s = std::sqrt(y.squaredNorm() / n);
    if (s > 1e-12) y /= s;
    Eigen::VectorXd y_tr(n_tr), y_ev(n_ev);
    for (int i = 0; i < n; ++i) (i % 2 == 0 ? y_tr[i / 2] : y_ev[i / 2]) = y[i];

    // held-out R^2: a predictor that carries no signal out-of-sample gets a
    // zero importance column instead of random spurious weights
    Eigen::VectorXd pred(n_ev);
    if (opt.predictor == "lasso") {
      auto w_tr = detail::lasso_fit(X_tr, y_tr, opt.lasso_alpha, opt.lasso_iters);
      pred.setZero();
      for (int j = 0; j < D; ++j)
        if (w_tr[j] != 0) pred += w_tr[j] * X_ev.col(j);
    } else {
      detail::stump_importance(X_tr, y_tr, opt.stump_rounds, opt.stump_lr,
                               &X_ev, &pred);
    }
    double ss_tot = (y_ev.array() - y_ev.mean()).square().sum();
    double ss_err = (y_ev - pred).squaredNorm();
    double r2 = ss_tot > 0 ? 1.0 - ss_err / ss_tot : 0.0;
    if (r2 < opt.min_r2) {
      out.warnings.push_back("factor '" + ds.spec[f].name +
                             "': held-out R^2 " + std::to_string(r2) +
                             " below threshold; importance zeroed");
      continue;
    }

    std::vector<double> imp;
    if (opt.predictor == "lasso") {
      auto w = detail::lasso_fit(X, y, opt.lasso_alpha, opt.lasso_iters);
      imp.resize(D);
      for (int j = 0; j < D; ++j) imp[j] = std::abs(w[j]);
    } else {
      imp = detail::stump_importance(X, y, opt.stump_rounds, opt.stump_lr);
    }
    for (int j = 0; j < D; ++j) out.importance[j * N + f] = imp[j];
  }

  double total_mass = 0;
  for (std::int64_t i = 0; i < out.importance.numel(); ++i)
    total_mass += out.importance[i];
  if (total_mass <= 0) {
    out.warnings.push_back("all-zero importance matrix; score 0");
    return out;
  }
  double score = 0;
  for (int j = 0; j < D; ++j) {
    double row_mass = 0;
    for (int f = 0; f < N; ++f) row_mass += out.importance[j * N + f];
    if (row_mass <= 0) {
      out.warnings.push_back("dimension " + std::to_string(j) +
                             " has zero importance for every factor");
      continue;
    }
    std::vector<double> p(N);
    for (int f = 0; f < N; ++f) p[f] = out.importance[j * N + f] / row_mass;
    double d_j = 1.0 - detail::entropy_nats(p) / std::log(double(N));
    score += (row_mass / total_mass) * d_j;
  }
  out.disentanglement = score;
  return out;
}

// ---- MIG -------------------------------------------------------------------

struct MigResult {
  double mig = 0.0;
  std::vector<std::string> warnings;
};

inline MigResult mig(const Tensor<double>& reps, const FactorDataset& ds,
                     int bins = 20) {
  if (bins < 2) throw std::invalid_argument("mig: bins must be >= 2");
  if (reps.dim(0) != static_cast<int>(ds.count()))
    throw std::invalid_argument("mig: reps/dataset mismatch");
  int n = reps.dim(0), D = reps.dim(1), N = ds.n_factors();

  // equal-frequency discretization (duplicate quantile edges collapsed so
  // tied values share a bin)
  std::vector<std::vector<int>> disc(D, std::vector<int>(n));
  for (int j = 0; j < D; ++j) {
    std::vector<double> sorted(n);
    for (int i = 0; i < n; ++i) sorted[i] = reps[i * D + j];
    std::sort(sorted.begin(), sorted.end());
    std::vector<double> edges;
    for (int b = 1; b < bins; ++b) {
      double e = sorted[std::min<std::int64_t>(n - 1, (std::int64_t)n * b / bins)];
      if (edges.empty() || e > edges.back()) edges.push_back(e);
    }
    for (int i = 0; i < n; ++i)
      disc[j][i] = static_cast<int>(
          std::lower_bound(edges.begin(), edges.end(), reps[i * D + j]) -
          edges.begin());
  }

  MigResult out;
  double acc = 0;
  int used = 0;
  for (int f = 0; f < N; ++f) {
    int K = ds.spec[f].cardinality;
    std::vector<double> pf(K, 0.0);
    for (int i = 0; i < n; ++i) pf[ds.label(i, f)] += 1.0 / n;
    double hf = detail::entropy_nats(pf);
    if (hf <= 0) {
      out.warnings.push_back("factor '" + ds.spec[f].name +
                             "' has zero entropy; skipped");
      continue;
    }
    double best = 0, second = 0;
    for (int j = 0; j < D; ++j) {
      int B = *std::max_element(disc[j].begin(), disc[j].end()) + 1;
      std::vector<double> joint(B * K, 0.0), pj(B, 0.0);
      for (int i = 0; i < n; ++i) {
        joint[disc[j][i] * K + ds.label(i, f)] += 1.0 / n;
        pj[disc[j][i]] += 1.0 / n;
      }
      double mi = 0;
      for (int b = 0; b < B; ++b)
        for (int k = 0; k < K; ++k) {
          double p = joint[b * K + k];
          if (p > 0) mi += p * std::log(p / (pj[b] * pf[k]));
        }
      if (mi > best) {
        second = best;
        best = mi;
      } else if (mi > second) {
        second = mi;
      }
    }
    acc += (best - second) / hf;
    ++used;
  }
  out.mig = used > 0 ? acc / used : 0.0;
  return out;
}

}  // namespace disdiff
