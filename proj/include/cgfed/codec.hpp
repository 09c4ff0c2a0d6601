#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "cgfed/graph.hpp"
#include "cgfed/tensor.hpp"

namespace cgfed {

// Autoencoder gradient codec. Two convolutional families are implemented:
//
//   cnn1d    — the canvas rows are treated as a batch of 1-channel signals;
//              `stages` stride-2 conv1d layers with ReLU, a 1x1 projection
//              to `latent_channels`, and the mirrored transposed stack.
//   resnet2d — a k x k stem conv, `stages` stride-2 convs doubling channels
//              per `channels`, `res_blocks` residual blocks on each side of
//              the bottleneck, the mirrored transposed stack, and a final
//              `final_kernel` conv.
//
// `identity` is the no-op codec used as the uncompressed baseline. The
// uformer family is reserved but not implemented.

enum class CodecFamily { kIdentity, kCnn1d, kResnet2d, kUformer };

const char* family_name(CodecFamily f);
CodecFamily family_from_name(const std::string& name);

struct CodecSpec {
  CodecFamily family = CodecFamily::kResnet2d;
  Shape input_shape;          // cnn1d: [rows, 1, cols]; resnet2d: [1, H, W];
                              // identity: [rows, cols]
  int stages = 3;
  std::vector<int> channels;  // stride-2 schedule; resnet2d latent channels
                              // are channels.back()
  int res_blocks = 3;
  int latent_channels = 4;    // cnn1d bottleneck projection
  int kernel = 3;
  int final_kernel = 7;
  std::uint64_t seed = 0;

  void validate() const;
  Shape latent_shape() const;
  Shape canvas_shape() const;  // the [rows, cols] canvas this spec consumes
  std::string to_json() const;
  static CodecSpec from_json(const std::string& text);
};

// Latent element count over input element count (pure shape arithmetic,
// independent of any learned parameters).
double compression_ratio(const CodecSpec& spec);

struct EncodedFeature {
  Tensor latent;
  Shape canvas_shape;
  std::uint64_t codec_id = 0;
};

class Codec {
public:
  CodecSpec spec;
  int trained_epochs = 0;
  // fixed preprocessing gain; training pins it to 1/RMS of the training
  // canvases so activations sit at unit scale, and decode divides it back out
  double input_gain = 1.0;
  // sorted by name so hashing and serialization are deterministic
  std::map<std::string, std::shared_ptr<Tensor>> params;

  bool trained() const { return trained_epochs > 0; }
  std::uint64_t hash() const;

  EncodedFeature encode(const Tensor& canvas) const;
  Tensor decode(const EncodedFeature& feature) const;

  void save(const std::string& path) const;
  static Codec load(const std::string& path);
};

Codec build(const CodecSpec& spec, std::uint64_t seed);

struct TrainCurves {
  std::vector<double> train_loss;  // per-epoch mean of minibatch losses
  std::vector<double> test_loss;   // per-epoch held-out reconstruction MSE
};

// TGAP: Adam on the mean-convention reconstruction MSE over the recorded
// canvases. Minibatches of `batch` canvases, reshuffled each epoch from
// `seed`. Throws on a non-finite loss (divergence) with a diagnostic.
TrainCurves train_tgap(Codec& codec, const std::vector<Tensor>& train_set,
                       const std::vector<Tensor>& test_set, int epochs, double lr = 2e-4,
                       Index batch = 4, std::uint64_t seed = 0);

// Named presets. Desk presets train on the default 128 x 64 canvas; paper
// presets reproduce the published shape arithmetic and are validated by
// shape only.
CodecSpec desk_resnet2d_spec(Index rows = 128, Index cols = 64);
CodecSpec desk_cnn1d_spec(Index rows = 128, Index cols = 64);
CodecSpec identity_spec(Index rows = 128, Index cols = 64);
CodecSpec paper_resnet2d_spec();
CodecSpec paper_cnn1d_spec();

}  // namespace cgfed
