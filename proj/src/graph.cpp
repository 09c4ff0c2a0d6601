#include "cgfed/graph.hpp"

#include <cmath>
#include <stdexcept>

namespace cgfed {

const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::kInput: return "input";
    case OpKind::kParam: return "param";
    case OpKind::kConst: return "const";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kAdd: return "add";
    case OpKind::kMul: return "mul";
    case OpKind::kScale: return "scale";
    case OpKind::kRelu: return "relu";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kConv1d: return "conv1d";
    case OpKind::kDeconv1d: return "deconv1d";
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kDeconv2d: return "deconv2d";
    case OpKind::kMean: return "mean";
    case OpKind::kMse: return "mse";
    case OpKind::kSoftmaxXent: return "softmax_xent";
  }
  return "?";
}

Index conv_out_len(Index n, int k, int s, int p) {
  const Index t = n + 2 * p - k;
  if (t < 0) throw std::invalid_argument("conv: kernel larger than padded input");
  return t / s + 1;
}

Index deconv_out_len(Index n, int k, int s, int p, int op) {
  if (op < 0 || op >= s) throw std::invalid_argument("deconv: out_pad must be in [0, stride)");
  const Index t = (n - 1) * s - 2 * p + k + op;
  if (t < 1) throw std::invalid_argument("deconv: empty output");
  return t;
}

namespace {

// src: one sample [C, Hs, Ws] row-major. Writes the [C*Kh*Kw, Ho*Wo] patch
// matrix into columns [col0, col0 + Ho*Wo) of col. Out-of-range taps are 0.
void im2col(const double* src, Index C, Index Hs, Index Ws, int Kh, int Kw, int sh,
            int sw, int ph, int pw, Index Ho, Index Wo, Mat2D& col, Index col0) {
  for (Index c = 0; c < C; ++c) {
    const double* plane = src + c * Hs * Ws;
    for (int ky = 0; ky < Kh; ++ky) {
      for (int kx = 0; kx < Kw; ++kx) {
        const Index row = (c * Kh + ky) * Kw + kx;
        double* rowp = col.row(row).data() + col0;
        for (Index oy = 0; oy < Ho; ++oy) {
          const Index iy = oy * sh + ky - ph;
          double* dst = rowp + oy * Wo;
          if (iy < 0 || iy >= Hs) {
            for (Index ox = 0; ox < Wo; ++ox) dst[ox] = 0.0;
            continue;
          }
          const double* srow = plane + iy * Ws;
          for (Index ox = 0; ox < Wo; ++ox) {
            const Index ix = ox * sw + kx - pw;
            dst[ox] = (ix < 0 || ix >= Ws) ? 0.0 : srow[ix];
          }
        }
      }
    }
  }
}

// Transpose of im2col: scatter-add columns [col0, col0 + Ho*Wo) back into
// one sample [C, Hs, Ws].
void col2im_add(const Mat2D& col, Index col0, Index C, Index Hs, Index Ws, int Kh,
                int Kw, int sh, int sw, int ph, int pw, Index Ho, Index Wo, double* dst) {
  for (Index c = 0; c < C; ++c) {
    double* plane = dst + c * Hs * Ws;
    for (int ky = 0; ky < Kh; ++ky) {
      for (int kx = 0; kx < Kw; ++kx) {
        const Index row = (c * Kh + ky) * Kw + kx;
        const double* rowp = col.row(row).data() + col0;
        for (Index oy = 0; oy < Ho; ++oy) {
          const Index iy = oy * sh + ky - ph;
          if (iy < 0 || iy >= Hs) continue;
          const double* srow = rowp + oy * Wo;
          double* drow = plane + iy * Ws;
          for (Index ox = 0; ox < Wo; ++ox) {
            const Index ix = ox * sw + kx - pw;
            if (ix >= 0 && ix < Ws) drow[ix] += srow[ox];
          }
        }
      }
    }
  }
}

void check_finite(const Tensor& t, const char* what, OpKind k) {
  if (t.data.size() > 0 && !t.finite())
    throw std::runtime_error(std::string("non-finite ") + what + " produced by " + op_name(k));
}

}  // namespace

NodeId Graph::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

Node& Graph::at(NodeId id) { return nodes_.at(static_cast<size_t>(id)); }
const Node& Graph::cat(NodeId id) const { return nodes_.at(static_cast<size_t>(id)); }

NodeId Graph::input(const std::string& name, Shape shape) {
  if (inputs_.count(name)) throw std::invalid_argument("duplicate input name: " + name);
  if (numel(shape) <= 0) throw std::invalid_argument("input " + name + ": bad shape");
  Node n;
  n.kind = OpKind::kInput;
  n.out_shape = std::move(shape);
  n.name = name;
  const NodeId id = push(std::move(n));
  inputs_[name] = id;
  return id;
}

NodeId Graph::param(const std::string& name, std::shared_ptr<Tensor> value) {
  if (!value) throw std::invalid_argument("param " + name + ": null tensor");
  Node n;
  n.kind = OpKind::kParam;
  n.out_shape = value->shape;
  n.name = name;
  n.param = std::move(value);
  const NodeId id = push(std::move(n));
  params_.push_back(id);
  return id;
}

NodeId Graph::constant(Tensor value) {
  Node n;
  n.kind = OpKind::kConst;
  n.out_shape = value.shape;
  n.value = std::move(value);
  return push(std::move(n));
}

NodeId Graph::matmul(NodeId a, NodeId b) {
  const Shape& sa = cat(a).out_shape;
  const Shape& sb = cat(b).out_shape;
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(sa) + " x " +
                                shape_str(sb));
  Node n;
  n.kind = OpKind::kMatMul;
  n.inputs = {a, b};
  n.out_shape = {sa[0], sb[1]};
  return push(std::move(n));
}

NodeId Graph::add(NodeId a, NodeId b) {
  const Shape& sa = cat(a).out_shape;
  const Shape& sb = cat(b).out_shape;
  if (sa != sb)
    throw std::invalid_argument("add: shape mismatch " + shape_str(sa) + " vs " + shape_str(sb));
  Node n;
  n.kind = OpKind::kAdd;
  n.inputs = {a, b};
  n.out_shape = sa;
  return push(std::move(n));
}

NodeId Graph::mul(NodeId a, NodeId b) {
  const Shape& sa = cat(a).out_shape;
  const Shape& sb = cat(b).out_shape;
  Shape out;
  if (sa == sb) {
    out = sa;
  } else if (sa.size() == 2 && sb.size() == 2 && sa[0] == sb[0] &&
             (sa[1] == 1 || sb[1] == 1)) {
    out = (sa[1] == 1) ? sb : sa;  // [b,1] column broadcast
  } else {
    throw std::invalid_argument("mul: shape mismatch " + shape_str(sa) + " vs " + shape_str(sb));
  }
  Node n;
  n.kind = OpKind::kMul;
  n.inputs = {a, b};
  n.out_shape = std::move(out);
  return push(std::move(n));
}

NodeId Graph::scale(NodeId a, double c) {
  Node n;
  n.kind = OpKind::kScale;
  n.inputs = {a};
  n.out_shape = cat(a).out_shape;
  n.scale_c = c;
  return push(std::move(n));
}

NodeId Graph::relu(NodeId a) {
  Node n;
  n.kind = OpKind::kRelu;
  n.inputs = {a};
  n.out_shape = cat(a).out_shape;
  return push(std::move(n));
}

NodeId Graph::sigmoid(NodeId a) {
  Node n;
  n.kind = OpKind::kSigmoid;
  n.inputs = {a};
  n.out_shape = cat(a).out_shape;
  return push(std::move(n));
}

NodeId Graph::conv1d(NodeId x, NodeId w, NodeId b, int stride, int pad) {
  const Shape& sx = cat(x).out_shape;
  const Shape& sw = cat(w).out_shape;
  const Shape& sb = cat(b).out_shape;
  if (sx.size() != 3 || sw.size() != 3 || sx[1] != sw[1])
    throw std::invalid_argument("conv1d: want x [N,C,L], w [F,C,K]; got " + shape_str(sx) +
                                ", " + shape_str(sw));
  if (sb.size() != 1 || sb[0] != sw[0]) throw std::invalid_argument("conv1d: bias shape");
  Node n;
  n.kind = OpKind::kConv1d;
  n.inputs = {x, w, b};
  n.conv = {stride, pad, 0};
  n.out_shape = {sx[0], sw[0], conv_out_len(sx[2], static_cast<int>(sw[2]), stride, pad)};
  return push(std::move(n));
}

NodeId Graph::deconv1d(NodeId x, NodeId w, NodeId b, int stride, int pad, int out_pad) {
  const Shape& sx = cat(x).out_shape;
  const Shape& sw = cat(w).out_shape;
  const Shape& sb = cat(b).out_shape;
  if (sx.size() != 3 || sw.size() != 3 || sx[1] != sw[0])
    throw std::invalid_argument("deconv1d: want x [N,C,L], w [C,F,K]; got " + shape_str(sx) +
                                ", " + shape_str(sw));
  if (sb.size() != 1 || sb[0] != sw[1]) throw std::invalid_argument("deconv1d: bias shape");
  Node n;
  n.kind = OpKind::kDeconv1d;
  n.inputs = {x, w, b};
  n.conv = {stride, pad, out_pad};
  n.out_shape = {sx[0], sw[1],
                 deconv_out_len(sx[2], static_cast<int>(sw[2]), stride, pad, out_pad)};
  return push(std::move(n));
}

NodeId Graph::conv2d(NodeId x, NodeId w, NodeId b, int stride, int pad) {
  const Shape& sx = cat(x).out_shape;
  const Shape& sw = cat(w).out_shape;
  const Shape& sb = cat(b).out_shape;
  if (sx.size() != 4 || sw.size() != 4 || sx[1] != sw[1])
    throw std::invalid_argument("conv2d: want x [N,C,H,W], w [F,C,Kh,Kw]; got " +
                                shape_str(sx) + ", " + shape_str(sw));
  if (sb.size() != 1 || sb[0] != sw[0]) throw std::invalid_argument("conv2d: bias shape");
  Node n;
  n.kind = OpKind::kConv2d;
  n.inputs = {x, w, b};
  n.conv = {stride, pad, 0};
  n.out_shape = {sx[0], sw[0], conv_out_len(sx[2], static_cast<int>(sw[2]), stride, pad),
                 conv_out_len(sx[3], static_cast<int>(sw[3]), stride, pad)};
  return push(std::move(n));
}

NodeId Graph::deconv2d(NodeId x, NodeId w, NodeId b, int stride, int pad, int out_pad) {
  const Shape& sx = cat(x).out_shape;
  const Shape& sw = cat(w).out_shape;
  const Shape& sb = cat(b).out_shape;
  if (sx.size() != 4 || sw.size() != 4 || sx[1] != sw[0])
    throw std::invalid_argument("deconv2d: want x [N,C,H,W], w [C,F,Kh,Kw]; got " +
                                shape_str(sx) + ", " + shape_str(sw));
  if (sb.size() != 1 || sb[0] != sw[1]) throw std::invalid_argument("deconv2d: bias shape");
  Node n;
  n.kind = OpKind::kDeconv2d;
  n.inputs = {x, w, b};
  n.conv = {stride, pad, out_pad};
  n.out_shape = {sx[0], sw[1],
                 deconv_out_len(sx[2], static_cast<int>(sw[2]), stride, pad, out_pad),
                 deconv_out_len(sx[3], static_cast<int>(sw[3]), stride, pad, out_pad)};
  return push(std::move(n));
}

NodeId Graph::mean(NodeId a) {
  Node n;
  n.kind = OpKind::kMean;
  n.inputs = {a};
  n.out_shape = {1};
  return push(std::move(n));
}

NodeId Graph::mse(NodeId a, NodeId b) {
  const Shape& sa = cat(a).out_shape;
  const Shape& sb = cat(b).out_shape;
  if (sa != sb)
    throw std::invalid_argument("mse: shape mismatch " + shape_str(sa) + " vs " + shape_str(sb));
  Node n;
  n.kind = OpKind::kMse;
  n.inputs = {a, b};
  n.out_shape = {1};
  return push(std::move(n));
}

NodeId Graph::softmax_xent(NodeId logits, NodeId onehot) {
  const Shape& sa = cat(logits).out_shape;
  const Shape& sb = cat(onehot).out_shape;
  if (sa.size() != 2 || sa != sb)
    throw std::invalid_argument("softmax_xent: want matching [b,C] shapes; got " +
                                shape_str(sa) + " vs " + shape_str(sb));
  Node n;
  n.kind = OpKind::kSoftmaxXent;
  n.inputs = {logits, onehot};
  n.out_shape = {1};
  return push(std::move(n));
}

void Graph::mark_output(const std::string& name, NodeId id) {
  cat(id);
  outputs_[name] = id;
}

const Tensor& Graph::value_of(NodeId id) const {
  const Node& n = cat(id);
  if (!n.computed) throw std::runtime_error("value_of: node not computed; run forward first");
  return n.value;
}

const Tensor& Graph::grad_of(NodeId id) const {
  const Node& n = cat(id);
  if (n.grad.numel() == 0) throw std::runtime_error("grad_of: run backward first");
  return n.grad;
}

std::unordered_map<std::string, Tensor> Graph::forward(
    const std::unordered_map<std::string, Tensor>& inputs) {
  for (const auto& [name, t] : inputs) {
    (void)t;
    if (!inputs_.count(name)) throw std::invalid_argument("forward: unknown input " + name);
  }
  for (auto& n : nodes_) n.computed = false;

  for (auto& n : nodes_) {
    switch (n.kind) {
      case OpKind::kInput: {
        auto it = inputs.find(n.name);
        if (it == inputs.end()) throw std::invalid_argument("forward: missing input " + n.name);
        if (it->second.shape != n.out_shape)
          throw std::invalid_argument("forward: input " + n.name + " shape " +
                                      shape_str(it->second.shape) + " != declared " +
                                      shape_str(n.out_shape));
        n.value = it->second;
        break;
      }
      case OpKind::kParam:
        n.value = *n.param;
        break;
      case OpKind::kConst:
        break;
      default:
        eval_node(n);
        break;
    }
    check_finite(n.value, "value", n.kind);
    n.computed = true;
  }
  forward_done_ = true;

  std::unordered_map<std::string, Tensor> out;
  for (const auto& [name, id] : outputs_) out[name] = cat(id).value;
  return out;
}

void Graph::eval_node(Node& n) {
  auto in = [&](int i) -> Node& { return at(n.inputs[static_cast<size_t>(i)]); };
  Node& a = in(0);
  if (n.value.shape != n.out_shape) n.value = Tensor::zeros(n.out_shape);

  switch (n.kind) {
    case OpKind::kMatMul: {
      Node& b = in(1);
      const Index m = a.out_shape[0], k = a.out_shape[1], p = b.out_shape[1];
      n.value.mat(m, p).noalias() = a.value.mat(m, k) * b.value.mat(k, p);
      break;
    }
    case OpKind::kAdd:
      n.value.data = a.value.data + in(1).value.data;
      break;
    case OpKind::kMul: {
      Node& b = in(1);
      if (a.out_shape == b.out_shape) {
        n.value.data = a.value.data * b.value.data;
      } else {
        Node& colv = (a.out_shape[1] == 1) ? a : b;
        Node& full = (a.out_shape[1] == 1) ? b : a;
        const Index rows = full.out_shape[0], cols = full.out_shape[1];
        auto fm = full.value.mat(rows, cols);
        auto cm = colv.value.mat(rows, 1);
        n.value.mat(rows, cols) = (fm.array().colwise() * cm.col(0).array()).matrix();
      }
      break;
    }
    case OpKind::kScale:
      n.value.data = n.scale_c * a.value.data;
      break;
    case OpKind::kRelu:
      n.value.data = a.value.data.max(0.0);
      break;
    case OpKind::kSigmoid:
      n.value.data = 1.0 / (1.0 + (-a.value.data).exp());
      break;
    case OpKind::kMean:
      n.value.data[0] = a.value.data.mean();
      break;
    case OpKind::kMse:
      n.value.data[0] = (a.value.data - in(1).value.data).square().mean();
      break;
    case OpKind::kSoftmaxXent: {
      Node& y = in(1);
      const Index bsz = a.out_shape[0], C = a.out_shape[1];
      auto z = a.value.mat(bsz, C);
      auto t = y.value.mat(bsz, C);
      n.aux.resize(bsz, C);
      double loss = 0.0;
      for (Index i = 0; i < bsz; ++i) {
        const double m = z.row(i).maxCoeff();
        Eigen::RowVectorXd e = (z.row(i).array() - m).exp().matrix();
        const double sum = e.sum();
        n.aux.row(i) = e / sum;
        loss += m + std::log(sum) - (t.row(i).array() * z.row(i).array()).sum();
      }
      n.value.data[0] = loss / static_cast<double>(bsz);
      break;
    }
    case OpKind::kConv1d: {
      Node& w = in(1);
      Node& bias = in(2);
      const Index N = a.out_shape[0], C = a.out_shape[1], L = a.out_shape[2];
      const Index F = w.out_shape[0];
      const int K = static_cast<int>(w.out_shape[2]);
      const Index Lo = n.out_shape[2];
      n.col.resize(C * K, N * Lo);
      auto wmat = w.value.mat(F, C * K);
      for (Index s = 0; s < N; ++s) {
        im2col(a.value.data.data() + s * C * L, C, 1, L, 1, K, 1, n.conv.stride, 0,
               n.conv.pad, 1, Lo, n.col, s * Lo);
        MatMap out(n.value.data.data() + s * F * Lo, F, Lo);
        out.noalias() = wmat * n.col.middleCols(s * Lo, Lo);
        out.colwise() += bias.value.mat(F, 1).col(0);
      }
      break;
    }
    case OpKind::kConv2d: {
      Node& w = in(1);
      Node& bias = in(2);
      const Index N = a.out_shape[0], C = a.out_shape[1], H = a.out_shape[2],
                  W = a.out_shape[3];
      const Index F = w.out_shape[0];
      const int Kh = static_cast<int>(w.out_shape[2]);
      const int Kw = static_cast<int>(w.out_shape[3]);
      const Index Ho = n.out_shape[2], Wo = n.out_shape[3];
      n.col.resize(C * Kh * Kw, N * Ho * Wo);
      auto wmat = w.value.mat(F, C * Kh * Kw);
      for (Index s = 0; s < N; ++s) {
        im2col(a.value.data.data() + s * C * H * W, C, H, W, Kh, Kw, n.conv.stride,
               n.conv.stride, n.conv.pad, n.conv.pad, Ho, Wo, n.col, s * Ho * Wo);
        MatMap out(n.value.data.data() + s * F * Ho * Wo, F, Ho * Wo);
        out.noalias() = wmat * n.col.middleCols(s * Ho * Wo, Ho * Wo);
        out.colwise() += bias.value.mat(F, 1).col(0);
      }
      break;
    }
    case OpKind::kDeconv1d: {
      Node& w = in(1);
      Node& bias = in(2);
      const Index N = a.out_shape[0], C = a.out_shape[1], L = a.out_shape[2];
      const Index F = w.out_shape[1];
      const int K = static_cast<int>(w.out_shape[2]);
      const Index Lo = n.out_shape[2];
      auto wmat = w.value.mat(C, F * K);
      Mat2D colbuf(F * K, L);
      n.value.data.setZero();
      for (Index s = 0; s < N; ++s) {
        ConstMatMap xs(a.value.data.data() + s * C * L, C, L);
        colbuf.noalias() = wmat.transpose() * xs;
        col2im_add(colbuf, 0, F, 1, Lo, 1, K, 1, n.conv.stride, 0, n.conv.pad, 1, L,
                   n.value.data.data() + s * F * Lo);
        MatMap out(n.value.data.data() + s * F * Lo, F, Lo);
        out.colwise() += bias.value.mat(F, 1).col(0);
      }
      break;
    }
    case OpKind::kDeconv2d: {
      Node& w = in(1);
      Node& bias = in(2);
      const Index N = a.out_shape[0], C = a.out_shape[1], H = a.out_shape[2],
                  W = a.out_shape[3];
      const Index F = w.out_shape[1];
      const int Kh = static_cast<int>(w.out_shape[2]);
      const int Kw = static_cast<int>(w.out_shape[3]);
      const Index Ho = n.out_shape[2], Wo = n.out_shape[3];
      auto wmat = w.value.mat(C, F * Kh * Kw);
      Mat2D colbuf(F * Kh * Kw, H * W);
      n.value.data.setZero();
      for (Index s = 0; s < N; ++s) {
        ConstMatMap xs(a.value.data.data() + s * C * H * W, C, H * W);
        colbuf.noalias() = wmat.transpose() * xs;
        col2im_add(colbuf, 0, F, Ho, Wo, Kh, Kw, n.conv.stride, n.conv.stride, n.conv.pad,
                   n.conv.pad, H, W, n.value.data.data() + s * F * Ho * Wo);
        MatMap out(n.value.data.data() + s * F * Ho * Wo, F, Ho * Wo);
        out.colwise() += bias.value.mat(F, 1).col(0);
      }
      break;
    }
    default:
      throw std::logic_error("eval_node: leaf op");
  }
}

void Graph::backward(NodeId loss) {
  if (!forward_done_) throw std::runtime_error("backward before forward");
  const Node& ln = cat(loss);
  if (!ln.computed) throw std::runtime_error("backward: loss node not computed");
  if (numel(ln.out_shape) != 1) throw std::invalid_argument("backward: loss is not scalar");

  for (auto& n : nodes_) {
    if (n.grad.shape != n.out_shape)
      n.grad = Tensor::zeros(n.out_shape);
    else
      n.grad.data.setZero();
  }
  at(loss).grad.data[0] = 1.0;

  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node& n = *it;
    if (n.inputs.empty()) continue;
    if (n.grad.data.abs().maxCoeff() == 0.0) continue;
    grad_node(n);
  }
  for (auto& n : nodes_) check_finite(n.grad, "gradient", n.kind);
}

void Graph::grad_node(Node& n) {
  auto in = [&](int i) -> Node& { return at(n.inputs[static_cast<size_t>(i)]); };
  Node& a = in(0);

  switch (n.kind) {
    case OpKind::kMatMul: {
      Node& b = in(1);
      const Index m = a.out_shape[0], k = a.out_shape[1], p = b.out_shape[1];
      a.grad.mat(m, k).noalias() += n.grad.mat(m, p) * b.value.mat(k, p).transpose();
      b.grad.mat(k, p).noalias() += a.value.mat(m, k).transpose() * n.grad.mat(m, p);
      break;
    }
    case OpKind::kAdd:
      a.grad.data += n.grad.data;
      in(1).grad.data += n.grad.data;
      break;
    case OpKind::kMul: {
      Node& b = in(1);
      if (a.out_shape == b.out_shape) {
        a.grad.data += n.grad.data * b.value.data;
        b.grad.data += n.grad.data * a.value.data;
      } else {
        Node& colv = (a.out_shape[1] == 1) ? a : b;
        Node& full = (a.out_shape[1] == 1) ? b : a;
        const Index rows = full.out_shape[0], cols = full.out_shape[1];
        auto gm = n.grad.mat(rows, cols);
        auto fm = full.value.mat(rows, cols);
        auto cgm = colv.grad.mat(rows, 1);
        cgm.col(0).array() += (gm.array() * fm.array()).rowwise().sum();
        auto fgm = full.grad.mat(rows, cols);
        fgm.array() += gm.array().colwise() * colv.value.mat(rows, 1).col(0).array();
      }
      break;
    }
    case OpKind::kScale:
      a.grad.data += n.scale_c * n.grad.data;
      break;
    case OpKind::kRelu:
      a.grad.data += (a.value.data > 0.0).cast<double>() * n.grad.data;
      break;
    case OpKind::kSigmoid:
      a.grad.data += n.value.data * (1.0 - n.value.data) * n.grad.data;
      break;
    case OpKind::kMean:
      a.grad.data += n.grad.data[0] / static_cast<double>(a.value.numel());
      break;
    case OpKind::kMse: {
      Node& b = in(1);
      const double c = 2.0 * n.grad.data[0] / static_cast<double>(a.value.numel());
      a.grad.data += c * (a.value.data - b.value.data);
      b.grad.data -= c * (a.value.data - b.value.data);
      break;
    }
    case OpKind::kSoftmaxXent: {
      Node& y = in(1);
      const Index bsz = a.out_shape[0], C = a.out_shape[1];
      const double g = n.grad.data[0] / static_cast<double>(bsz);
      a.grad.mat(bsz, C) += g * (n.aux - y.value.mat(bsz, C));
      y.grad.mat(bsz, C) -= g * a.value.mat(bsz, C);
      break;
    }
    case OpKind::kConv1d: {
      Node& w = in(1);
      Node& bias = in(2);
      const Index N = a.out_shape[0], C = a.out_shape[1], L = a.out_shape[2];
      const Index F = w.out_shape[0];
      const int K = static_cast<int>(w.out_shape[2]);
      const Index Lo = n.out_shape[2];
      auto wmat = w.value.mat(F, C * K);
      auto dwmat = w.grad.mat(F, C * K);
      auto dbias = bias.grad.mat(F, 1);
      Mat2D dcol(C * K, Lo);
      for (Index s = 0; s < N; ++s) {
        ConstMatMap dout(n.grad.data.data() + s * F * Lo, F, Lo);
        dwmat.noalias() += dout * n.col.middleCols(s * Lo, Lo).transpose();
        dbias.col(0) += dout.rowwise().sum();
        dcol.noalias() = wmat.transpose() * dout;
        col2im_add(dcol, 0, C, 1, L, 1, K, 1, n.conv.stride, 0, n.conv.pad, 1, Lo,
                   a.grad.data.data() + s * C * L);
      }
      break;
    }
    case OpKind::kConv2d: {
      Node& w = in(1);
      Node& bias = in(2);
      const Index N = a.out_shape[0], C = a.out_shape[1], H = a.out_shape[2],
                  W = a.out_shape[3];
      const Index F = w.out_shape[0];
      const int Kh = static_cast<int>(w.out_shape[2]);
      const int Kw = static_cast<int>(w.out_shape[3]);
      const Index Ho = n.out_shape[2], Wo = n.out_shape[3];
      auto wmat = w.value.mat(F, C * Kh * Kw);
      auto dwmat = w.grad.mat(F, C * Kh * Kw);
      auto dbias = bias.grad.mat(F, 1);
      Mat2D dcol(C * Kh * Kw, Ho * Wo);
      for (Index s = 0; s < N; ++s) {
        ConstMatMap dout(n.grad.data.data() + s * F * Ho * Wo, F, Ho * Wo);
        dwmat.noalias() += dout * n.col.middleCols(s * Ho * Wo, Ho * Wo).transpose();
        dbias.col(0) += dout.rowwise().sum();
        dcol.noalias() = wmat.transpose() * dout;
        col2im_add(dcol, 0, C, H, W, Kh, Kw, n.conv.stride, n.conv.stride, n.conv.pad,
                   n.conv.pad, Ho, Wo, a.grad.data.data() + s * C * H * W);
      }
      break;
    }
    case OpKind::kDeconv1d: {
      Node& w = in(1);
      Node& bias = in(2);
      const Index N = a.out_shape[0], C = a.out_shape[1], L = a.out_shape[2];
      const Index F = w.out_shape[1];
      const int K = static_cast<int>(w.out_shape[2]);
      const Index Lo = n.out_shape[2];
      auto wmat = w.value.mat(C, F * K);
      auto dwmat = w.grad.mat(C, F * K);
      auto dbias = bias.grad.mat(F, 1);
      Mat2D gcol(F * K, L);
      for (Index s = 0; s < N; ++s) {
        im2col(n.grad.data.data() + s * F * Lo, F, 1, Lo, 1, K, 1, n.conv.stride, 0,
               n.conv.pad, 1, L, gcol, 0);
        ConstMatMap xs(a.value.data.data() + s * C * L, C, L);
        dwmat.noalias() += xs * gcol.transpose();
        ConstMatMap dout(n.grad.data.data() + s * F * Lo, F, Lo);
        dbias.col(0) += dout.rowwise().sum();
        MatMap dx(a.grad.data.data() + s * C * L, C, L);
        dx.noalias() += wmat * gcol;
      }
      break;
    }
    case OpKind::kDeconv2d: {
      Node& w = in(1);
      Node& bias = in(2);
      const Index N = a.out_shape[0], C = a.out_shape[1], H = a.out_shape[2],
                  W = a.out_shape[3];
      const Index F = w.out_shape[1];
      const int Kh = static_cast<int>(w.out_shape[2]);
      const int Kw = static_cast<int>(w.out_shape[3]);
      const Index Ho = n.out_shape[2], Wo = n.out_shape[3];
      auto wmat = w.value.mat(C, F * Kh * Kw);
      auto dwmat = w.grad.mat(C, F * Kh * Kw);
      auto dbias = bias.grad.mat(F, 1);
      Mat2D gcol(F * Kh * Kw, H * W);
      for (Index s = 0; s < N; ++s) {
        im2col(n.grad.data.data() + s * F * Ho * Wo, F, Ho, Wo, Kh, Kw, n.conv.stride,
               n.conv.stride, n.conv.pad, n.conv.pad, H, W, gcol, 0);
        ConstMatMap xs(a.value.data.data() + s * C * H * W, C, H * W);
        dwmat.noalias() += xs * gcol.transpose();
        ConstMatMap dout(n.grad.data.data() + s * F * Ho * Wo, F, Ho * Wo);
        dbias.col(0) += dout.rowwise().sum();
        MatMap dx(a.grad.data.data() + s * C * H * W, C, H * W);
        dx.noalias() += wmat * gcol;
      }
      break;
    }
    default:
      break;  // leaves
  }
}

std::vector<Graph::ParamRef> Graph::trainables() {
  std::vector<ParamRef> out;
  out.reserve(params_.size());
  for (NodeId id : params_) {
    Node& n = at(id);
    if (n.grad.shape != n.out_shape) n.grad = Tensor::zeros(n.out_shape);
    out.push_back({n.name, n.param.get(), &n.grad});
  }
  return out;
}

void adam_step(AdamState& state, const std::vector<Graph::ParamRef>& params) {
  if (state.lr <= 0.0) throw std::invalid_argument("adam_step: lr must be positive");
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (const auto& p : params) {
    const Index nel = p.value->numel();
    if (p.grad->numel() != nel)
      throw std::invalid_argument("adam_step: grad/param shape mismatch for " + p.name);
    auto& [m, v] = state.moments[p.name];
    if (m.size() == 0) {
      m = Arr1D::Zero(nel);
      v = Arr1D::Zero(nel);
    } else if (m.size() != nel) {
      throw std::invalid_argument("adam_step: moment shape mismatch for " + p.name);
    }
    m = state.beta1 * m + (1.0 - state.beta1) * p.grad->data;
    v = state.beta2 * v + (1.0 - state.beta2) * p.grad->data.square();
    p.value->data -= state.lr * (m / bc1) / ((v / bc2).sqrt() + state.eps);
  }
}

}  // namespace cgfed
