#include "galite/kron.hpp"

#include "galite/csv.hpp"

#include <cmath>
#include <numbers>
#include <ostream>
#include <random>

namespace galite::kron {

double delta_hat(std::int64_t m, std::int64_t n, std::int64_t r) {
  if (r < 1) throw ContractError("delta_hat: r must be >= 1");
  const double two_pi = 2.0 * std::numbers::pi;
  double acc = 0.0;
  for (std::int64_t i = 0; i <= r; ++i) {
    const double w = two_pi * static_cast<double>(i) / static_cast<double>(r);
    acc += std::cos(w * static_cast<double>(m)) * std::cos(w * static_cast<double>(n));
  }
  return 2.0 / static_cast<double>(r) * acc;
}

double delta_hat_closed_form(std::int64_t m, std::int64_t n, std::int64_t r) {
  if (r < 1) throw ContractError("delta_hat_closed_form: r must be >= 1");
  auto s = [r](std::int64_t k) { return k % r == 0 ? static_cast<double>(r + 1) : 1.0; };
  return (s(m - n) + s(m + n)) / static_cast<double>(r);
}

double phase(std::int64_t k, std::int64_t t, std::int64_t r) {
  const std::int64_t reduced = ((k % r) * (t % r)) % r;
  return std::cos(2.0 * std::numbers::pi * static_cast<double>(reduced) / static_cast<double>(r));
}

void validate(const GatedSequence& seq) {
  const auto steps = seq.values.size();
  require_shape(steps >= 1, "gated sequence: empty");
  require_shape(seq.keys.size() == steps && seq.betas.size() == steps && seq.gammas.size() == steps,
                "gated sequence: length mismatch");
  const Index dv = seq.values.front().size();
  const Index dk = seq.keys.front().size();
  for (std::size_t t = 0; t < steps; ++t) {
    require_shape(seq.values[t].size() == dv && seq.betas[t].size() == dv,
                  "gated sequence: value/beta dimension mismatch");
    require_shape(seq.keys[t].size() == dk && seq.gammas[t].size() == dk,
                  "gated sequence: key/gamma dimension mismatch");
  }
}

Mat exact_state(const GatedSequence& seq) {
  validate(seq);
  const Index dv = seq.values.front().size();
  const Index dk = seq.keys.front().size();
  Mat c = Mat::Zero(dv, dk);
  for (std::size_t t = 0; t < seq.values.size(); ++t) {
    const Vec keep_v = Vec::Ones(dv) - seq.betas[t];
    const Vec keep_k = Vec::Ones(dk) - seq.gammas[t];
    c = (keep_v * keep_k.transpose()).cwiseProduct(c) +
        seq.betas[t].cwiseProduct(seq.values[t]) * seq.gammas[t].cwiseProduct(seq.keys[t]).transpose();
  }
  return c;
}

Mat reconstruct_state(const GatedSequence& seq, std::int64_t r) {
  validate(seq);
  if (r < 1) throw ContractError("reconstruct_state: r must be >= 1");
  const Index dv = seq.values.front().size();
  const Index dk = seq.keys.front().size();
  const auto terms = static_cast<Index>(r + 1);
  Mat vt = Mat::Zero(terms, dv);
  Mat kt = Mat::Zero(terms, dk);
  for (std::size_t t = 0; t < seq.values.size(); ++t) {
    const Vec bv = seq.betas[t].cwiseProduct(seq.values[t]);
    const Vec gk = seq.gammas[t].cwiseProduct(seq.keys[t]);
    const Vec keep_v = Vec::Ones(dv) - seq.betas[t];
    const Vec keep_k = Vec::Ones(dk) - seq.gammas[t];
    for (Index k = 0; k < terms; ++k) {
      const double ph = phase(k, static_cast<std::int64_t>(t) + 1, r);
      vt.row(k) = vt.row(k).cwiseProduct(keep_v.transpose()) + ph * bv.transpose();
      kt.row(k) = kt.row(k).cwiseProduct(keep_k.transpose()) + ph * gk.transpose();
    }
  }
  return (2.0 / static_cast<double>(r)) * (vt.transpose() * kt);
}

Mat rank1_sign_reconstruct(const GatedSequence& seq, Rng& rng) {
  validate(seq);
  const Index dv = seq.values.front().size();
  const Index dk = seq.keys.front().size();
  std::bernoulli_distribution coin(0.5);
  Vec vt = Vec::Zero(dv);
  Vec kt = Vec::Zero(dk);
  for (std::size_t t = 0; t < seq.values.size(); ++t) {
    const double sign = coin(rng) ? 1.0 : -1.0;
    vt = (Vec::Ones(dv) - seq.betas[t]).cwiseProduct(vt) + sign * seq.betas[t].cwiseProduct(seq.values[t]);
    kt = (Vec::Ones(dk) - seq.gammas[t]).cwiseProduct(kt) + sign * seq.gammas[t].cwiseProduct(seq.keys[t]);
  }
  return vt * kt.transpose();
}

GatedSequence constant_gate_sequence(Index d, Index steps, double c, Rng& rng) {
  GatedSequence seq;
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Index t = 0; t < steps; ++t) {
    Vec v(d), k(d);
    for (Index i = 0; i < d; ++i) v[i] = normal(rng);
    for (Index i = 0; i < d; ++i) k[i] = normal(rng);
    seq.values.push_back(std::move(v));
    seq.keys.push_back(std::move(k));
    seq.betas.push_back(Vec::Constant(d, c));
    seq.gammas.push_back(Vec::Constant(d, c));
  }
  return seq;
}

std::vector<ApproxErrorRow> approx_error_experiment(const ApproxErrorConfig& cfg) {
  const auto nr = cfg.r_grid.size();
  const auto nc = cfg.c_grid.size();
  const auto ns = static_cast<std::size_t>(cfg.seeds);
  std::vector<ApproxErrorRow> rows(nr * nc * ns);

#pragma omp parallel for num_threads(cfg.threads > 0 ? cfg.threads : 1) schedule(dynamic)
  for (long s = 0; s < static_cast<long>(ns); ++s) {
    Rng rng = make_rng(cfg.base_seed, {static_cast<std::uint64_t>(s)});
    GatedSequence seq = constant_gate_sequence(cfg.d, cfg.steps, 0.0, rng);
    for (std::size_t ci = 0; ci < nc; ++ci) {
      const double c = cfg.c_grid[ci];
      for (std::size_t t = 0; t < seq.betas.size(); ++t) {
        seq.betas[t].setConstant(c);
        seq.gammas[t].setConstant(c);
      }
      const Mat exact = exact_state(seq);
      const double norm = exact.norm();
      for (std::size_t ri = 0; ri < nr; ++ri) {
        const Mat approx = reconstruct_state(seq, cfg.r_grid[ri]);
        ApproxErrorRow row;
        row.r = cfg.r_grid[ri];
        row.c = c;
        row.seed = static_cast<int>(s);
        row.frobenius_error = (approx - exact).norm();
        row.relative_error = norm > 0.0 ? row.frobenius_error / norm : 0.0;
        rows[(ri * nc + ci) * ns + static_cast<std::size_t>(s)] = row;
      }
    }
  }
  return rows;
}

std::map<std::pair<std::int64_t, double>, double> mean_errors(const std::vector<ApproxErrorRow>& rows) {
  std::map<std::pair<std::int64_t, double>, std::pair<double, int>> acc;
  for (const auto& row : rows) {
    auto& cell = acc[{row.r, row.c}];
    cell.first += row.frobenius_error;
    cell.second += 1;
  }
  std::map<std::pair<std::int64_t, double>, double> out;
  for (const auto& [key, cell] : acc) out[key] = cell.first / cell.second;
  return out;
}

void write_approx_error_csv(std::ostream& os, const std::vector<ApproxErrorRow>& rows) {
  os << "r,c,seed,frobenius_error\n";
  for (const auto& row : rows)
    os << row.r << ',' << fmt_sig17(row.c) << ',' << row.seed << ',' << fmt_sig17(row.frobenius_error) << '\n';
}

}  // namespace galite::kron
