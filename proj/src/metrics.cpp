#include "cgfed/metrics.hpp"

#include <limits>
#include <stdexcept>

#include "cgfed/privacy.hpp"

namespace cgfed {

SnrReport snr(const Tensor& reference, const Tensor& reconstructed) {
  require_same_shape(reference, reconstructed, "snr");
  SnrReport r;
  r.signal_power = reference.data.square().sum();
  r.mse = (reference.data - reconstructed.data).square().mean();
  r.snr = r.mse == 0.0 ? std::numeric_limits<double>::infinity() : r.signal_power / r.mse;
  return r;
}

double snr_consistent(const Tensor& reference, const Tensor& reconstructed) {
  require_same_shape(reference, reconstructed, "snr_consistent");
  const double sse = (reference.data - reconstructed.data).square().sum();
  const double power = reference.data.square().sum();
  return sse == 0.0 ? std::numeric_limits<double>::infinity() : power / sse;
}

std::vector<ChannelRow> noisy_channel_eval(const Codec& codec,
                                           const std::vector<Tensor>& canvases,
                                           const std::vector<double>& sigmas, Rng& rng) {
  if (canvases.empty()) throw std::invalid_argument("noisy_channel_eval: no canvases");
  std::vector<ChannelRow> rows;
  rows.reserve(sigmas.size());
  for (double sigma : sigmas) {
    if (sigma < 0.0) throw std::invalid_argument("noisy_channel_eval: negative sigma");
    ChannelRow row;
    row.sigma = sigma;
    for (const Tensor& x : canvases) {
      const Tensor noisy = noise(x, sigma, rng);
      const Tensor recon = codec.decode(codec.encode(noisy));
      row.signal_power += x.data.square().sum();
      row.identity_mse += (noisy.data - x.data).square().mean();
      row.codec_mse += (recon.data - x.data).square().mean();
    }
    const double n = static_cast<double>(canvases.size());
    row.signal_power /= n;
    row.identity_mse /= n;
    row.codec_mse /= n;
    row.identity_snr = row.identity_mse == 0.0 ? std::numeric_limits<double>::infinity()
                                               : row.signal_power / row.identity_mse;
    row.codec_snr = row.codec_mse == 0.0 ? std::numeric_limits<double>::infinity()
                                         : row.signal_power / row.codec_mse;
    rows.push_back(row);
  }
  return rows;
}

}  // namespace cgfed
