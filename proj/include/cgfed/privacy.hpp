#pragma once

#include <array>
#include <cstdint>

#include "cgfed/rng.hpp"
#include "cgfed/tensor.hpp"

namespace cgfed {

// Client-level differential privacy layer: per-tensor L2 clipping, Gaussian
// noising, and the Gaussian-DP accountant
//
//   mu     = p * sqrt(T) * sqrt(exp(1/sigma^2) - 1)
//   delta(eps) = Phi(-eps/mu + mu/2) - exp(eps) * Phi(-eps/mu - mu/2)
//
// evaluated via erfc/erfcx so the tails stay accurate far beyond where the
// naive difference of normal CDFs cancels or saturates.

struct PrivacySpec {
  double clip = 1.0;      // C, L2 bound per factor tensor
  double sigma = 0.0;     // per-element noise standard deviation
  double p = 1.0;         // client sampling probability (K/M)
  long rounds = 1;        // T
  double epsilon = 2.0;   // target budget
  double delta = 1e-2;    // target delta
  std::uint64_t seed = 0;

  void validate() const;
};

struct PrivacySpend {
  double mu = 0.0;
  double delta_at_epsilon = 0.0;
};

inline constexpr std::array<double, 3> kEpsilonPresets = {0.25, 2.0, 8.0};

// Standard normal CDF via erfc; absolute error well under 1e-14 (checked
// against tabulated values in the test suite).
double normal_cdf(double x);

// Scaled complementary error function exp(x^2) erfc(x) for x >= 0.
double erfcx_pos(double x);

// X * min(1, C / ||X||_2); a zero tensor passes through unchanged.
Tensor clip(const Tensor& x, double c);

// X + sigma * n with n iid standard normal from rng. sigma = 0 returns X
// exactly and consumes no draws.
Tensor noise(const Tensor& x, double sigma, Rng& rng);

// Lemma-style sensitivity of the aggregated, clipped update: C / K.
double sensitivity(double c, long k);

double gdp_mu(double p, long rounds, double sigma);
double gdp_delta(double epsilon, double mu);

// Smallest-sigma root of gdp_delta(eps, gdp_mu(p, T, sigma)) == delta,
// found by log-space bisection (the map is strictly decreasing in sigma).
double calibrate_sigma(double epsilon, double delta, double p, long rounds);

// Spend after `rounds_elapsed` of the configured mechanism; the simulator's
// per-round ledger uses exactly this function.
PrivacySpend accountant_spend(const PrivacySpec& spec, long rounds_elapsed);

}  // namespace cgfed
