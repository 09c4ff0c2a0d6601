#pragma once

#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "cgfed/tensor.hpp"

namespace cgfed {

// Reverse-mode engine over a static node list. A graph is built once
// (shapes are inferred and validated at build time), then run many times:
// forward() binds fresh input tensors and retains every intermediate,
// backward() accumulates gradients for all parameter nodes.
//
// Supported ops are exactly the closure needed by the convolutional codec
// families and the toy target model: matmul, add, elementwise mul (with the
// [b,1] column broadcast the gate needs), scalar scale, relu, sigmoid,
// conv/deconv in 1-D and 2-D, mean, mse, and a fused softmax cross-entropy.
//
// A Graph instance is single-threaded; distinct instances may run
// concurrently. Parameters are shared_ptr so several graphs (e.g. an
// autoencoder's train/encode/decode views) can share one parameter set.

enum class OpKind {
  kInput,
  kParam,
  kConst,
  kMatMul,
  kAdd,
  kMul,
  kScale,
  kRelu,
  kSigmoid,
  kConv1d,
  kDeconv1d,
  kConv2d,
  kDeconv2d,
  kMean,
  kMse,
  kSoftmaxXent,
};

const char* op_name(OpKind k);

struct ConvAttrs {
  int stride = 1;
  int pad = 0;
  int out_pad = 0;  // transposed conv only
};

using NodeId = int;

struct Node {
  OpKind kind;
  std::vector<NodeId> inputs;
  Shape out_shape;
  ConvAttrs conv;
  double scale_c = 1.0;
  std::string name;                  // inputs and params carry names
  std::shared_ptr<Tensor> param;     // kParam storage, shared across graphs

  Tensor value;
  Tensor grad;
  Mat2D col;    // im2col cache (conv ops)
  Mat2D aux;    // softmax cache
  bool computed = false;
};

// Conv/deconv shape law. conv_out_len floors; deconv_out_len inverts it for
// the stride/pad/out_pad combinations the codec tables use.
Index conv_out_len(Index n, int k, int s, int p);
Index deconv_out_len(Index n, int k, int s, int p, int op);

class Graph {
public:
  NodeId input(const std::string& name, Shape shape);
  NodeId param(const std::string& name, std::shared_ptr<Tensor> value);
  NodeId constant(Tensor value);

  NodeId matmul(NodeId a, NodeId b);
  NodeId add(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId a, double c);
  NodeId relu(NodeId a);
  NodeId sigmoid(NodeId a);
  // x: [N,C,L], w: [F,C,K], b: [F]
  NodeId conv1d(NodeId x, NodeId w, NodeId b, int stride, int pad);
  // x: [N,C,L], w: [C,F,K], b: [F]
  NodeId deconv1d(NodeId x, NodeId w, NodeId b, int stride, int pad, int out_pad);
  // x: [N,C,H,W], w: [F,C,Kh,Kw], b: [F]
  NodeId conv2d(NodeId x, NodeId w, NodeId b, int stride, int pad);
  // x: [N,C,H,W], w: [C,F,Kh,Kw], b: [F]
  NodeId deconv2d(NodeId x, NodeId w, NodeId b, int stride, int pad, int out_pad);
  NodeId mean(NodeId a);
  NodeId mse(NodeId a, NodeId b);
  NodeId softmax_xent(NodeId logits, NodeId onehot);

  void mark_output(const std::string& name, NodeId id);

  std::unordered_map<std::string, Tensor> forward(
      const std::unordered_map<std::string, Tensor>& inputs);
  void backward(NodeId loss);

  const Shape& shape_of(NodeId id) const { return nodes_[id].out_shape; }
  const Tensor& value_of(NodeId id) const;
  const Tensor& grad_of(NodeId id) const;

  struct ParamRef {
    std::string name;
    Tensor* value;
    const Tensor* grad;
  };
  // Trainable parameters in creation order, with their current gradients.
  std::vector<ParamRef> trainables();

  size_t node_count() const { return nodes_.size(); }

private:
  NodeId push(Node n);
  Node& at(NodeId id);
  const Node& cat(NodeId id) const;

  void eval_node(Node& n);
  void grad_node(Node& n);

  std::vector<Node> nodes_;
  std::vector<NodeId> params_;
  std::unordered_map<std::string, NodeId> inputs_;
  std::unordered_map<std::string, NodeId> outputs_;
  bool forward_done_ = false;
};

// Adam with bias correction. Moment tensors shape-match their parameters
// and are created lazily on the first step; the step counter is shared by
// all parameters of one state.
struct AdamState {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  std::unordered_map<std::string, std::pair<Arr1D, Arr1D>> moments;
};

void adam_step(AdamState& state, const std::vector<Graph::ParamRef>& params);

}  // namespace cgfed
