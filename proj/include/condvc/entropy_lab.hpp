#pragma once

// Exhaustive information-theory checks on small discrete sources: conditional
// vs residual entropy, predictor pushforwards and brute-force optimal
// predictors over one or more candidate variables.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "condvc/nn.hpp"

namespace condvc::lab {

class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class BudgetError : public std::runtime_error {
 public:
  BudgetError(const std::string& msg, double required) : std::runtime_error(msg), required_(required) {}
  double required() const { return required_; }

 private:
  double required_;
};

inline constexpr double kSumTolerance = 1e-12;
inline constexpr double kDefaultBudget = 1e7;

namespace detail {

inline double plogp(double p) { return p > 0.0 ? -p * std::log2(p) : 0.0; }

inline void validate_pmf(const std::vector<double>& p, const char* who) {
  if (p.empty()) throw ValidationError(std::string(who) + ": empty distribution");
  double s = 0.0;
  for (double v : p) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ValidationError(std::string(who) + ": negative or non-finite entry");
    s += v;
  }
  if (std::abs(s - 1.0) > kSumTolerance)
    throw ValidationError(std::string(who) + ": entries sum to " + std::to_string(s) + ", not 1");
}

// H(A|B) for a table q[a * nb + b]. Only the table matters, so equal tables
// give bit-identical results.
inline double conditional_from_table(const std::vector<double>& q, std::size_t na, std::size_t nb) {
  double h = 0.0;
  for (std::size_t b = 0; b < nb; ++b) {
    double pb = 0.0;
    for (std::size_t a = 0; a < na; ++a) pb += q[a * nb + b];
    if (pb <= 0.0) continue;
    for (std::size_t a = 0; a < na; ++a) {
      const double v = q[a * nb + b];
      if (v > 0.0) h -= v * std::log2(v / pb);
    }
  }
  return std::max(h, 0.0);
}

}  // namespace detail

inline double entropy(const std::vector<double>& pmf) {
  detail::validate_pmf(pmf, "entropy");
  double h = 0.0;
  for (double p : pmf) h += detail::plogp(p);
  return std::max(h, 0.0);
}

// Joint table over integer alphabets, probs[ix * |Y| + iy].
struct JointPMF {
  std::vector<int> alphabet_x;
  std::vector<int> alphabet_y;
  std::vector<double> probs;

  std::size_t nx() const { return alphabet_x.size(); }
  std::size_t ny() const { return alphabet_y.size(); }
  double p(std::size_t ix, std::size_t iy) const { return probs[ix * ny() + iy]; }

  void validate() const {
    if (alphabet_x.empty() || alphabet_y.empty()) throw ValidationError("JointPMF: alphabets must be nonempty");
    if (probs.size() != nx() * ny())
      throw ValidationError("JointPMF: table has " + std::to_string(probs.size()) + " cells, expected " +
                            std::to_string(nx() * ny()));
    for (const auto* a : {&alphabet_x, &alphabet_y}) {
      auto s = *a;
      std::sort(s.begin(), s.end());
      if (std::adjacent_find(s.begin(), s.end()) != s.end())
        throw ValidationError("JointPMF: repeated symbol in alphabet");
    }
    detail::validate_pmf(probs, "JointPMF");
  }

  std::vector<double> marginal_x() const {
    std::vector<double> m(nx(), 0.0);
    for (std::size_t i = 0; i < nx(); ++i)
      for (std::size_t j = 0; j < ny(); ++j) m[i] += p(i, j);
    return m;
  }
  std::vector<double> marginal_y() const {
    std::vector<double> m(ny(), 0.0);
    for (std::size_t i = 0; i < nx(); ++i)
      for (std::size_t j = 0; j < ny(); ++j) m[j] += p(i, j);
    return m;
  }
  JointPMF transposed() const {
    JointPMF t{alphabet_y, alphabet_x, std::vector<double>(probs.size())};
    for (std::size_t i = 0; i < nx(); ++i)
      for (std::size_t j = 0; j < ny(); ++j) t.probs[j * nx() + i] = p(i, j);
    return t;
  }
};

// Total map from Y indices to codomain indices; codomain symbols are the
// numeric values used when the predictor output is subtracted from X.
struct Predictor {
  std::vector<std::size_t> table;
  std::vector<int> codomain;

  void validate(std::size_t domain_size) const {
    if (codomain.empty()) throw ValidationError("Predictor: empty codomain");
    if (table.size() != domain_size)
      throw ValidationError("Predictor: table covers " + std::to_string(table.size()) + " of " +
                            std::to_string(domain_size) + " domain symbols");
    for (auto c : table)
      if (c >= codomain.size()) throw ValidationError("Predictor: output outside codomain");
  }

  static Predictor identity(const std::vector<int>& alphabet) {
    Predictor f{std::vector<std::size_t>(alphabet.size()), alphabet};
    for (std::size_t i = 0; i < alphabet.size(); ++i) f.table[i] = i;
    return f;
  }
  static Predictor constant(std::size_t domain_size, int value = 0) {
    return Predictor{std::vector<std::size_t>(domain_size, 0), {value}};
  }
};

inline double marginal_entropy_x(const JointPMF& j) {
  j.validate();
  return entropy(j.marginal_x());
}

inline double conditional_entropy(const JointPMF& j) {
  j.validate();
  return detail::conditional_from_table(j.probs, j.nx(), j.ny());
}

namespace detail {
inline double entropy_of_differences(const JointPMF& j, const std::vector<int>& yvalue_of_index,
                                     const std::vector<std::size_t>& yindex_map) {
  std::map<long long, double> r;
  for (std::size_t i = 0; i < j.nx(); ++i)
    for (std::size_t k = 0; k < j.ny(); ++k)
      r[static_cast<long long>(j.alphabet_x[i]) - yvalue_of_index[yindex_map[k]]] += j.p(i, k);
  double h = 0.0;
  for (const auto& [d, p] : r) h += plogp(p);
  return std::max(h, 0.0);
}
}  // namespace detail

inline double residual_entropy(const JointPMF& j) {
  j.validate();
  std::vector<std::size_t> id(j.ny());
  for (std::size_t k = 0; k < j.ny(); ++k) id[k] = k;
  return detail::entropy_of_differences(j, j.alphabet_y, id);
}

inline double mutual_information(const JointPMF& j) {
  j.validate();
  return entropy(j.marginal_x()) - conditional_entropy(j);
}

// Joint of (X, f(Y)).
inline JointPMF pushforward(const JointPMF& j, const Predictor& f) {
  j.validate();
  f.validate(j.ny());
  JointPMF out{j.alphabet_x, f.codomain, std::vector<double>(j.nx() * f.codomain.size(), 0.0)};
  for (std::size_t i = 0; i < j.nx(); ++i)
    for (std::size_t k = 0; k < j.ny(); ++k) out.probs[i * f.codomain.size() + f.table[k]] += j.p(i, k);
  return out;
}

inline double predictor_conditional_entropy(const JointPMF& j, const Predictor& f) {
  const JointPMF q = pushforward(j, f);
  return detail::conditional_from_table(q.probs, q.nx(), q.ny());
}

// H(X - f(Y)): residual coding with f as the predictor.
inline double predictor_residual_entropy(const JointPMF& j, const Predictor& f) {
  j.validate();
  f.validate(j.ny());
  return detail::entropy_of_differences(j, f.codomain, f.table);
}

// Joint over X and n candidates, probs[ix * D + flat(y1..yn)] with the last
// candidate varying fastest.
struct MultiJointPMF {
  std::vector<int> alphabet_x;
  std::vector<std::vector<int>> candidates;
  std::vector<double> probs;

  std::size_t domain_size() const {
    std::size_t d = 1;
    for (const auto& c : candidates) d *= c.size();
    return d;
  }

  // Flattened view: Y is the tuple index (its numeric value is meaningless).
  JointPMF flattened() const {
    std::vector<int> idx(domain_size());
    for (std::size_t k = 0; k < idx.size(); ++k) idx[k] = static_cast<int>(k);
    JointPMF j{alphabet_x, idx, probs};
    j.validate();
    return j;
  }

  // Marginal over the first `keep` candidates.
  MultiJointPMF leading(std::size_t keep) const {
    if (keep == 0 || keep > candidates.size()) throw ValidationError("MultiJointPMF::leading: bad candidate count");
    MultiJointPMF m{alphabet_x, {candidates.begin(), candidates.begin() + keep}, {}};
    const std::size_t dk = m.domain_size(), d = domain_size(), tail = d / dk;
    m.probs.assign(alphabet_x.size() * dk, 0.0);
    for (std::size_t i = 0; i < alphabet_x.size(); ++i)
      for (std::size_t k = 0; k < d; ++k) m.probs[i * dk + k / tail] += probs[i * d + k];
    return m;
  }
};

// Default codomain symbols: the X alphabet, extended upward when more
// outputs are requested than X has symbols.
inline std::vector<int> default_codomain(const std::vector<int>& alphabet_x, std::size_t size) {
  std::vector<int> c(alphabet_x.begin(), alphabet_x.begin() + std::min(size, alphabet_x.size()));
  int next = alphabet_x.empty() ? 0 : *std::max_element(alphabet_x.begin(), alphabet_x.end()) + 1;
  while (c.size() < size) c.push_back(next++);
  return c;
}

inline double enumeration_count(std::size_t codomain_size, std::size_t domain_size) {
  return std::pow(static_cast<double>(codomain_size), static_cast<double>(domain_size));
}

// Visits every predictor table in lexicographic order.
template <typename Fn>
void for_each_predictor(std::size_t domain_size, std::size_t codomain_size, double budget, Fn&& fn) {
  if (codomain_size == 0) throw ValidationError("codomain_size must be positive");
  const double need = enumeration_count(codomain_size, domain_size);
  if (need > budget)
    throw BudgetError("predictor search needs " + std::to_string(static_cast<long double>(need)) +
                          " evaluations (codomain " + std::to_string(codomain_size) + "^" +
                          std::to_string(domain_size) + "), budget is " +
                          std::to_string(static_cast<long double>(budget)),
                      need);
  std::vector<std::size_t> t(domain_size, 0);
  while (true) {
    fn(static_cast<const std::vector<std::size_t>&>(t));
    std::size_t k = domain_size;
    while (k > 0) {
      --k;
      if (++t[k] < codomain_size) break;
      t[k] = 0;
      if (k == 0) return;
    }
    if (domain_size == 0) return;
  }
}

struct OptimalPredictor {
  Predictor predictor;
  double bits{0.0};
  double evaluated{0.0};
};

// argmin_f H(X | f(Y1..Yn)) by exhaustive enumeration; the first minimum in
// lexicographic table order wins.
inline OptimalPredictor optimal_predictor(const MultiJointPMF& m, std::size_t codomain_size,
                                          double budget = kDefaultBudget, std::vector<int> codomain = {}) {
  const JointPMF j = m.flattened();
  if (codomain.empty()) codomain = default_codomain(j.alphabet_x, codomain_size);
  if (codomain.size() != codomain_size) throw ValidationError("optimal_predictor: codomain size mismatch");
  const std::size_t nx = j.nx(), d = j.ny();
  OptimalPredictor best;
  best.bits = std::numeric_limits<double>::infinity();
  std::vector<double> q(nx * codomain_size);
  for_each_predictor(d, codomain_size, budget, [&](const std::vector<std::size_t>& t) {
    std::fill(q.begin(), q.end(), 0.0);
    for (std::size_t i = 0; i < nx; ++i)
      for (std::size_t k = 0; k < d; ++k) q[i * codomain_size + t[k]] += j.probs[i * d + k];
    const double h = detail::conditional_from_table(q, nx, codomain_size);
    best.evaluated += 1;
    if (h < best.bits) {
      best.bits = h;
      best.predictor = Predictor{t, codomain};
    }
  });
  return best;
}

// ---------------------------------------------------------------------------
// Random instances and the batch experiment

// Dirichlet(1,..,1) sample rounded to multiples of 2^-30 (largest remainder),
// so every partial sum of cells is exact in double precision.
inline std::vector<double> random_dyadic_pmf(std::size_t n, Rng& rng) {
  constexpr std::uint64_t kUnits = 1ULL << 30;
  std::vector<double> g(n);
  double s = 0;
  for (auto& v : g) {
    v = -std::log(1.0 - rng.uniform());
    s += v;
  }
  std::vector<std::uint64_t> units(n);
  std::vector<std::pair<double, std::size_t>> rem(n);
  std::uint64_t used = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double exact = g[i] / s * static_cast<double>(kUnits);
    units[i] = static_cast<std::uint64_t>(std::floor(exact));
    used += units[i];
    rem[i] = {exact - std::floor(exact), i};
  }
  std::sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); });
  for (std::size_t k = 0; used < kUnits; ++k, ++used) ++units[rem[k % n].second];
  std::vector<double> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = std::ldexp(static_cast<double>(units[i]), -30);
  return p;
}

inline std::vector<int> consecutive_alphabet(int first, std::size_t n) {
  std::vector<int> a(n);
  for (std::size_t i = 0; i < n; ++i) a[i] = first + static_cast<int>(i);
  return a;
}

inline JointPMF random_joint(Rng& rng, std::size_t max_alphabet) {
  const std::size_t nx = 1 + rng.below(max_alphabet), ny = 1 + rng.below(max_alphabet);
  const int ox = static_cast<int>(rng.below(5)) - 2, oy = static_cast<int>(rng.below(5)) - 2;
  return JointPMF{consecutive_alphabet(ox, nx), consecutive_alphabet(oy, ny), random_dyadic_pmf(nx * ny, rng)};
}

inline MultiJointPMF random_multi_joint(Rng& rng, std::size_t candidates, std::size_t max_alphabet) {
  MultiJointPMF m;
  m.alphabet_x = consecutive_alphabet(0, 2 + rng.below(max_alphabet - 1));
  for (std::size_t c = 0; c < candidates; ++c) m.candidates.push_back(consecutive_alphabet(0, 2 + rng.below(max_alphabet - 1)));
  m.probs = random_dyadic_pmf(m.alphabet_x.size() * m.domain_size(), rng);
  return m;
}

inline Predictor random_predictor(std::size_t domain, const std::vector<int>& codomain, Rng& rng) {
  Predictor f{std::vector<std::size_t>(domain), codomain};
  for (auto& v : f.table) v = rng.below(codomain.size());
  return f;
}

struct LabConfig {
  int trials{1000};
  std::size_t max_alphabet{8};
  int predictors_per_trial{8};
  int multi_instances{100};
  std::size_t multi_max_alphabet{3};
  std::size_t multi_codomain{3};
  double budget{kDefaultBudget};
  // Slack for links that are mathematical inequalities but evaluated with
  // different summation orders on each side.
  double tolerance{1e-9};
  double chain_tolerance{1e-12};
  std::uint64_t seed{7};
};

struct Check {
  std::string name;
  long long count{0};
  long long violations{0};
  double min_margin{std::numeric_limits<double>::infinity()};

  void record(double lhs, double rhs, double tol) {
    ++count;
    const double margin = rhs - lhs;
    min_margin = std::min(min_margin, margin);
    if (margin < -tol) ++violations;
  }
};

struct LabReport {
  LabConfig config;
  std::vector<Check> checks;

  long long violations() const {
    long long v = 0;
    for (const auto& c : checks) v += c.violations;
    return v;
  }
  const Check& check(const std::string& name) const {
    for (const auto& c : checks)
      if (c.name == name) return c;
    throw std::out_of_range("no check named " + name);
  }

  void write_text(std::ostream& os) const {
    os << "entropy lab: trials=" << config.trials << " max_alphabet=" << config.max_alphabet
       << " multi_instances=" << config.multi_instances << " seed=" << config.seed << "\n";
    for (const auto& c : checks)
      os << "  " << c.name << ": checks=" << c.count << " violations=" << c.violations << " min_margin=" << c.min_margin
         << "\n";
    os << "total violations: " << violations() << "\n";
  }
  void write_csv(std::ostream& os) const {
    os << "check,count,violations,min_margin\n";
    for (const auto& c : checks) os << c.name << "," << c.count << "," << c.violations << "," << c.min_margin << "\n";
  }
};

inline LabReport run_lab(const LabConfig& cfg) {
  Rng rng(cfg.seed);
  Check residual{"cond_le_residual"}, predictor{"cond_le_predictor"}, mi_nonneg{"mi_nonnegative"},
      mi_sym{"mi_symmetric"}, chain1{"chain_cond_le_optimal"}, chain2{"chain_optimal_le_any"},
      chain3{"chain_any_le_residual"}, mono{"more_candidates_not_worse"};

  for (int t = 0; t < cfg.trials; ++t) {
    const JointPMF j = random_joint(rng, cfg.max_alphabet);
    const double hc = conditional_entropy(j);
    residual.record(hc, residual_entropy(j), cfg.tolerance);
    const double mi = mutual_information(j);
    mi_nonneg.record(0.0, mi, 1e-12);
    const double mi_t = mutual_information(j.transposed());
    mi_sym.record(std::abs(mi - mi_t), 0.0, 1e-12);
    for (int k = 0; k < cfg.predictors_per_trial; ++k) {
      const auto codomain = default_codomain(j.alphabet_x, 1 + rng.below(j.ny()));
      predictor.record(hc, predictor_conditional_entropy(j, random_predictor(j.ny(), codomain, rng)), cfg.tolerance);
    }
  }

  for (int t = 0; t < cfg.multi_instances; ++t) {
    const MultiJointPMF m2 = random_multi_joint(rng, 2, cfg.multi_max_alphabet);
    const MultiJointPMF m1 = m2.leading(1);
    const std::size_t cs = cfg.multi_codomain;
    const auto opt2 = optimal_predictor(m2, cs, cfg.budget);
    const auto opt1 = optimal_predictor(m1, cs, cfg.budget);
    // exact: the one-candidate search space embeds in the two-candidate one
    mono.record(opt2.bits, opt1.bits, 0.0);
    const JointPMF j = m2.flattened();
    chain1.record(conditional_entropy(j), opt2.bits, cfg.chain_tolerance);
    const auto codomain = opt2.predictor.codomain;
    for_each_predictor(j.ny(), cs, cfg.budget, [&](const std::vector<std::size_t>& table) {
      const Predictor f{table, codomain};
      const double h = predictor_conditional_entropy(j, f);
      chain2.record(opt2.bits, h, 0.0);
      chain3.record(h, predictor_residual_entropy(j, f), cfg.chain_tolerance);
    });
  }
  return LabReport{cfg, {residual, predictor, mi_nonneg, mi_sym, chain1, chain2, chain3, mono}};
}

}  // namespace condvc::lab
