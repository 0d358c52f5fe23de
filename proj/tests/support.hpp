#pragma once

// Independent reference implementations and fixtures shared by the tests.

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "sprc/sprc.hpp"

namespace sprc::test {

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("sprc_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline Matrix<double> random_unit_rows(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  Matrix<double> m = random_normal<double>(rows, cols, rng, 1.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double n = 0;
    for (double v : m.row(r)) n += v * v;
    n = std::sqrt(n);
    for (double& v : m.row(r)) v /= n;
  }
  return m;
}

/// Plain -(1/B) sum_i log(exp(s_ii) / sum_j exp(s_ij)), no max subtraction.
inline double oracle_contrastive(const Matrix<double>& U, const Matrix<double>& V, double tau) {
  const std::size_t B = U.rows();
  double total = 0;
  for (std::size_t i = 0; i < B; ++i) {
    double denom = 0, num = 0;
    for (std::size_t j = 0; j < B; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < U.cols(); ++k) s += U(i, k) * V(j, k);
      const double e = std::exp(tau * s);
      denom += e;
      if (i == j) num = e;
    }
    total += -std::log(num / denom);
  }
  return total / double(B);
}

/// 1-based rank of `target` among all candidates but `excluded` (-1 for
/// none): one plus the number of candidates that beat it, where ties go to
/// the lower index.
inline std::size_t oracle_rank(const std::vector<double>& scores, std::size_t target, long excluded) {
  std::size_t rank = 1;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (static_cast<long>(i) == excluded || i == target) continue;
    if (scores[i] > scores[target] || (scores[i] == scores[target] && i < target)) ++rank;
  }
  return rank;
}

/// Candidate order by selection: repeatedly take the best remaining.
inline std::vector<std::size_t> oracle_order(const std::vector<double>& scores, long excluded) {
  std::vector<bool> used(scores.size(), false);
  if (excluded >= 0) used[static_cast<std::size_t>(excluded)] = true;
  std::vector<std::size_t> out;
  for (;;) {
    long best = -1;
    for (std::size_t i = 0; i < scores.size(); ++i)
      if (!used[i] && (best < 0 || scores[i] > scores[static_cast<std::size_t>(best)])) best = static_cast<long>(i);
    if (best < 0) break;
    used[static_cast<std::size_t>(best)] = true;
    out.push_back(static_cast<std::size_t>(best));
  }
  return out;
}

struct GradCheck {
  double max_rel_error = 0;
  std::string worst;
  std::size_t checked = 0;
};

/// Central differences over every entry of every non-frozen parameter,
/// compared with the gradients already stored in Parameter::grad.
/// Relative error is |a - n| / max(|a|, |n|, floor).
inline GradCheck finite_difference_check(ParamMap<double>& params, const std::function<double()>& loss,
                                         double h = 1e-5, double floor = 1e-6) {
  GradCheck out;
  for (auto& [name, p] : params) {
    if (p.frozen) continue;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double orig = p.value[i];
      p.value[i] = orig + h;
      const double up = loss();
      p.value[i] = orig - h;
      const double down = loss();
      p.value[i] = orig;
      const double numeric = (up - down) / (2 * h);
      const double analytic = p.grad[i];
      const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
      ++out.checked;
      if (rel > out.max_rel_error) {
        out.max_rel_error = rel;
        out.worst = name + "[" + std::to_string(i) + "] analytic " + std::to_string(analytic) + " numeric " +
                    std::to_string(numeric);
      }
    }
  }
  return out;
}

/// Collects warnings for its lifetime instead of printing them.
struct WarningCapture {
  std::vector<std::string> seen;
  std::function<void(const std::string&)> saved = warning_sink();
  WarningCapture() {
    warning_sink() = [this](const std::string& m) { seen.push_back(m); };
  }
  ~WarningCapture() { warning_sink() = saved; }
};

inline SyntheticSpec small_spec(std::uint64_t seed = 1) {
  SyntheticSpec s;
  s.n_slots = 2;
  s.n_object_types = 4;
  s.n_attr_values = 3;
  s.corpus_size = 24;
  s.n_triplets = 12;
  s.d_img = 8;
  s.seed = seed;
  return s;
}

inline TrainConfig toy_config() {
  TrainConfig c;
  c.d_model = 16;
  c.d_embed = 16;
  c.d_ff = 32;
  c.n_heads = 2;
  c.prompt_length = 4;
  c.batch_size = 3;
  c.steps = 50;
  c.tau = 10;
  c.inversion_hidden = 16;
  c.aux.inner_steps = 3;
  return c;
}

}  // namespace sprc::test

namespace sprc {

inline void PrintTo(const RankedResult& r, std::ostream* os) {
  *os << r.query_id << ": target_rank " << r.target_rank << ", first " << (r.ranked_ids.empty() ? "-" : r.ranked_ids[0])
      << ", " << r.ranked_ids.size() << " candidates";
}

}  // namespace sprc
