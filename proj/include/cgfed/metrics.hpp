#pragma once

#include <vector>

#include "cgfed/codec.hpp"
#include "cgfed/rng.hpp"
#include "cgfed/tensor.hpp"

namespace cgfed {

// Measurement arithmetic in the published tables' convention: signal power
// is a SUM of squares while the reconstruction error is a MEAN of squares,
// and SNR is their quotient. That mixed convention is deliberate (it is the
// only one consistent with the reference tables); snr_consistent() is the
// unit-consistent alternative for users who want matching units.

struct SnrReport {
  double signal_power = 0.0;  // sum of squared reference elements
  double mse = 0.0;           // mean squared element difference
  double snr = 0.0;           // signal_power / mse; +inf sentinel when mse == 0
};

SnrReport snr(const Tensor& reference, const Tensor& reconstructed);

// Same-units ratio: sum/sum, which equals mean/mean.
double snr_consistent(const Tensor& reference, const Tensor& reconstructed);

struct ChannelRow {
  double sigma = 0.0;
  double signal_power = 0.0;  // mean over canvases of per-canvas power
  double identity_mse = 0.0;
  double identity_snr = 0.0;
  double codec_mse = 0.0;
  double codec_snr = 0.0;
};

// For each sigma: perturb every canvas once with Gaussian noise, then score
// the identity channel (x + n) and the codec channel (decode(encode(x + n)))
// against the clean canvas, averaging per-canvas powers and MSEs.
std::vector<ChannelRow> noisy_channel_eval(const Codec& codec,
                                           const std::vector<Tensor>& canvases,
                                           const std::vector<double>& sigmas, Rng& rng);

}  // namespace cgfed
