#include "cgfed/privacy.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace cgfed {

namespace {
constexpr double kSqrt2 = 1.4142135623730950488;
constexpr double kSqrtPi = 1.7724538509055160273;
}  // namespace

void PrivacySpec::validate() const {
  if (clip <= 0.0) throw std::invalid_argument("privacy: clip bound C must be > 0");
  if (sigma < 0.0) throw std::invalid_argument("privacy: sigma must be >= 0");
  if (p <= 0.0 || p > 1.0) throw std::invalid_argument("privacy: p must be in (0,1]");
  if (rounds < 1) throw std::invalid_argument("privacy: rounds must be >= 1");
  if (epsilon <= 0.0) throw std::invalid_argument("privacy: epsilon must be > 0");
  if (delta <= 0.0 || delta >= 1.0) throw std::invalid_argument("privacy: delta must be in (0,1)");
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / kSqrt2); }

double erfcx_pos(double x) {
  if (x < 0.0) throw std::invalid_argument("erfcx_pos: negative argument");
  if (std::isinf(x)) return 0.0;
  if (x < 6.0) return std::exp(x * x) * std::erfc(x);
  // Laplace continued fraction; converges fast for x >= 6
  double f = 0.0;
  for (int k = 30; k >= 1; --k) f = (0.5 * k) / (x + f);
  return 1.0 / (kSqrtPi * (x + f));
}

Tensor clip(const Tensor& x, double c) {
  if (c <= 0.0) throw std::invalid_argument("clip: C must be > 0");
  Tensor out = x;
  // iterate the rescale until the computed norm is within the bound, so the
  // operator is exactly idempotent in floating point
  for (double norm = l2_norm(out); norm > c; norm = l2_norm(out)) out.data *= c / norm;
  return out;
}

Tensor noise(const Tensor& x, double sigma, Rng& rng) {
  if (sigma < 0.0) throw std::invalid_argument("noise: sigma must be >= 0");
  if (sigma == 0.0) return x;
  Tensor out = x;
  for (Index i = 0; i < out.numel(); ++i) out.data[i] += sigma * rng.normal();
  return out;
}

double sensitivity(double c, long k) {
  if (c <= 0.0) throw std::invalid_argument("sensitivity: C must be > 0");
  if (k < 1) throw std::invalid_argument("sensitivity: K must be >= 1");
  return c / static_cast<double>(k);
}

double gdp_mu(double p, long rounds, double sigma) {
  if (p <= 0.0 || p > 1.0) throw std::invalid_argument("gdp_mu: p must be in (0,1]");
  if (rounds < 1) throw std::invalid_argument("gdp_mu: rounds must be >= 1");
  if (sigma <= 0.0) throw std::invalid_argument("gdp_mu: sigma must be > 0 (mu diverges)");
  const double nu = p * std::sqrt(static_cast<double>(rounds));
  return nu * std::sqrt(std::expm1(1.0 / (sigma * sigma)));
}

double gdp_delta(double epsilon, double mu) {
  if (epsilon < 0.0) throw std::invalid_argument("gdp_delta: epsilon must be >= 0");
  if (mu < 0.0) throw std::invalid_argument("gdp_delta: mu must be >= 0");
  if (mu == 0.0) return 0.0;
  if (std::isinf(mu)) return 1.0;
  // delta = Phi(-e/m + m/2) - exp(e) Phi(-e/m - m/2)
  //       = 0.5 * [ erfc(t) - exp(-t^2) erfcx(y) ],
  // t = (e/m - m/2)/sqrt(2), y = (e/m + m/2)/sqrt(2); y >= 0 always.
  const double t = (epsilon / mu - mu / 2.0) / kSqrt2;
  const double y = (epsilon / mu + mu / 2.0) / kSqrt2;
  const double d = 0.5 * (std::erfc(t) - std::exp(-t * t) * erfcx_pos(y));
  if (d < 0.0) return 0.0;
  return d > 1.0 ? 1.0 : d;
}

double calibrate_sigma(double epsilon, double delta, double p, long rounds) {
  if (epsilon <= 0.0) throw std::invalid_argument("calibrate_sigma: epsilon must be > 0");
  if (delta <= 0.0 || delta >= 1.0)
    throw std::invalid_argument("calibrate_sigma: delta must be in (0,1)");
  auto f = [&](double sigma) { return gdp_delta(epsilon, gdp_mu(p, rounds, sigma)); };

  double lo = 1e-3, hi = 1e9;
  if (f(lo) < delta || f(hi) > delta)
    throw std::runtime_error("calibrate_sigma: target (epsilon, delta) infeasible in bracket");
  double llo = std::log(lo), lhi = std::log(hi);
  for (int it = 0; it < 200; ++it) {
    const double lmid = 0.5 * (llo + lhi);
    if (f(std::exp(lmid)) >= delta)
      llo = lmid;  // delta decreases with sigma
    else
      lhi = lmid;
  }
  const double sigma = std::exp(0.5 * (llo + lhi));
  if (std::abs(f(sigma) - delta) > 1e-9 && std::abs(f(sigma) - delta) > 1e-6 * delta)
    throw std::runtime_error("calibrate_sigma: bisection did not meet tolerance");
  return sigma;
}

PrivacySpend accountant_spend(const PrivacySpec& spec, long rounds_elapsed) {
  spec.validate();
  if (rounds_elapsed < 0) throw std::invalid_argument("accountant_spend: negative rounds");
  PrivacySpend s;
  if (rounds_elapsed == 0 || spec.sigma == 0.0) {
    // sigma = 0 means no mechanism ran; report an empty ledger entry
    s.mu = spec.sigma == 0.0 && rounds_elapsed > 0
               ? std::numeric_limits<double>::infinity()
               : 0.0;
    s.delta_at_epsilon = s.mu == 0.0 ? 0.0 : 1.0;
    return s;
  }
  s.mu = gdp_mu(spec.p, rounds_elapsed, spec.sigma);
  s.delta_at_epsilon = gdp_delta(spec.epsilon, s.mu);
  return s;
}

}  // namespace cgfed
