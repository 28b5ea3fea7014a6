#pragma once

// Per-modality volumetric encoders (DCGAN-style strided convolutions), the
// local / global projection heads, the mirrored decoder used by the
// reconstruction baselines and the linear classifier of the supervised one.

#include <array>
#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "mscl/autograd.hpp"
#include "mscl/error.hpp"
#include "mscl/rng.hpp"
#include "mscl/volume.hpp"

namespace mscl {

template <class T>
using Var = ag::Var<T>;

struct EncoderSpec {
  int input_side = 16;
  std::vector<int> channels{8, 16, 32, 64};
  int local_layer = 2;
  int repr_dim = 64;
  double leaky_slope = 0.2;
  int kernel = 4;

  int n_layers() const { return int(channels.size()); }
  int side_after(int layer) const { return input_side >> layer; }
  int local_side() const { return side_after(local_layer); }
  int local_channels() const { return channels.at(std::size_t(local_layer - 1)); }
  int local_locations() const { return local_side() * local_side() * local_side(); }
  int final_side() const { return side_after(n_layers()); }

  void validate() const {
    const int L = n_layers();
    if (L < 3) throw ConfigError("EncoderSpec: need at least 3 strided stages (1 < l < L)");
    if (local_layer <= 1 || local_layer >= L)
      throw ConfigError("EncoderSpec: local_layer must satisfy 1 < l < L=" + std::to_string(L) + ", got " +
                        std::to_string(local_layer));
    if (input_side <= 0 || input_side % (1 << L) != 0)
      throw ConfigError("EncoderSpec: input_side " + std::to_string(input_side) + " is not divisible by 2^L = " +
                        std::to_string(1 << L));
    for (int c : channels)
      if (c < 1) throw ConfigError("EncoderSpec: channel counts must be positive");
    if (repr_dim < 1) throw ConfigError("EncoderSpec: repr_dim must be positive");
    if (kernel != 4) throw ConfigError("EncoderSpec: stride-2 stages use kernel 4 (pad 1)");
  }

  /// The ladder used for 64^3 inputs: 64 -> 32 -> 16 -> 8 -> 4 -> 2, locals 128 x 8^3.
  static EncoderSpec dcgan64() {
    EncoderSpec s;
    s.input_side = 64;
    s.channels = {32, 64, 128, 256, 512};
    s.local_layer = 3;
    s.repr_dim = 64;
    return s;
  }
};

/// Receptive field (voxels per edge) of one unit after `layer` strided stages.
inline int receptive_field(const EncoderSpec& spec, int layer) {
  int rf = 1, jump = 1;
  for (int i = 0; i < layer; ++i) {
    rf += (spec.kernel - 1) * jump;
    jump *= 2;
  }
  return rf;
}

struct LocalHeadSpec {
  int hidden = 64;
};

struct GlobalHeadSpec {
  /// -1: no head; 0: one linear layer; 1..3: hidden layers of `width` with ReLU.
  int hidden_layers = 0;
  int width = 64;
};

struct ModelSpec {
  EncoderSpec encoder;
  LocalHeadSpec local;
  GlobalHeadSpec global;
  bool with_local_head = false;
  bool with_global_head = false;
  bool with_decoder = false;
  int n_classes = 0;  // > 0 attaches a linear classifier on z

  void validate() const {
    encoder.validate();
    if (global.hidden_layers < -1 || global.hidden_layers > 3)
      throw ConfigError("GlobalHeadSpec: hidden_layers must be in -1..3");
  }
};

inline void to_json(nlohmann::json& j, const EncoderSpec& s) {
  j = {{"input_side", s.input_side}, {"channels", s.channels}, {"local_layer", s.local_layer},
       {"repr_dim", s.repr_dim},     {"leaky_slope", s.leaky_slope}, {"kernel", s.kernel}};
}
inline void from_json(const nlohmann::json& j, EncoderSpec& s) {
  EncoderSpec d;
  s.input_side = j.value("input_side", d.input_side);
  s.channels = j.value("channels", d.channels);
  s.local_layer = j.value("local_layer", d.local_layer);
  s.repr_dim = j.value("repr_dim", d.repr_dim);
  s.leaky_slope = j.value("leaky_slope", d.leaky_slope);
  s.kernel = j.value("kernel", d.kernel);
}
inline void to_json(nlohmann::json& j, const ModelSpec& s) {
  j = {{"encoder", s.encoder},
       {"local_hidden", s.local.hidden},
       {"global_hidden_layers", s.global.hidden_layers},
       {"global_width", s.global.width},
       {"with_local_head", s.with_local_head},
       {"with_global_head", s.with_global_head},
       {"with_decoder", s.with_decoder},
       {"n_classes", s.n_classes}};
}
inline void from_json(const nlohmann::json& j, ModelSpec& s) {
  s.encoder = j.value("encoder", EncoderSpec{});
  s.local.hidden = j.value("local_hidden", 64);
  s.global.hidden_layers = j.value("global_hidden_layers", 0);
  s.global.width = j.value("global_width", 64);
  s.with_local_head = j.value("with_local_head", false);
  s.with_global_head = j.value("with_global_head", false);
  s.with_decoder = j.value("with_decoder", false);
  s.n_classes = j.value("n_classes", 0);
}

// ---------------------------------------------------------------------------
// Parameters

template <class T>
struct ParameterSet {
  std::vector<std::string> names;
  std::vector<Var<T>> tensors;

  Var<T> add(std::string name, ag::Shape shape, std::vector<T> values) {
    for (const auto& n : names)
      if (n == name) throw ConfigError("duplicate parameter name " + name);
    names.push_back(std::move(name));
    tensors.push_back(Var<T>::leaf(std::move(shape), std::move(values), true));
    return tensors.back();
  }
  const Var<T>& at(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return tensors[i];
    throw ConfigError("no parameter named " + name);
  }
  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.size();
    return n;
  }
  void zero_grad() {
    for (auto& t : tensors) t.zero_grad();
  }
};

inline double activation_gain_leaky(double slope) { return std::sqrt(2.0 / (1.0 + slope * slope)); }

namespace model_detail {

template <class T>
std::vector<T> xavier_uniform(std::size_t n, double fan_in, double fan_out, double gain, Rng& rng) {
  const double bound = gain * std::sqrt(6.0 / (fan_in + fan_out));
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(u(rng));
  return v;
}

}  // namespace model_detail

template <class T>
struct LinearLayer {
  Var<T> weight;  // [out,in]
  Var<T> bias;    // [out]

  static LinearLayer make(ParameterSet<T>& ps, const std::string& name, int in, int out, double gain, Rng& rng) {
    LinearLayer l;
    l.weight = ps.add(name + ".weight", {std::size_t(out), std::size_t(in)},
                      model_detail::xavier_uniform<T>(std::size_t(in) * out, in, out, gain, rng));
    l.bias = ps.add(name + ".bias", {std::size_t(out)}, std::vector<T>(std::size_t(out), T(0)));
    return l;
  }
  Var<T> operator()(const Var<T>& x) const { return ag::linear(x, weight, bias); }
  int in_dim() const { return int(weight.dim(1)); }
  int out_dim() const { return int(weight.dim(0)); }
};

template <class T>
struct ForwardOutputs {
  Var<T> z;          // [B,d]
  Var<T> local_map;  // [B,C,s,s,s] activations after the exported stage
  /// [B,S,C] view of local_map: one channel vector per location.
  Var<T> locals() const { return ag::channels_last(local_map); }
};

template <class T>
struct Encoder {
  EncoderSpec spec;
  std::vector<Var<T>> conv_w, conv_b;
  LinearLayer<T> fc;

  ForwardOutputs<T> forward(const Var<T>& x) const {
    if (x.rank() != 5 || x.dim(1) != 1)
      throw ConfigError("encoder: expected input [B,1,side,side,side], got " + ag::to_string(x.shape()));
    for (int a = 2; a < 5; ++a)
      if (int(x.dim(std::size_t(a))) != spec.input_side)
        throw ConfigError("encoder: input side " + std::to_string(x.dim(std::size_t(a))) + " does not match spec side " +
                          std::to_string(spec.input_side));
    ForwardOutputs<T> out;
    Var<T> h = x;
    const T slope = static_cast<T>(spec.leaky_slope);
    for (int i = 0; i < spec.n_layers(); ++i) {
      h = ag::leaky_relu(ag::conv3d(h, conv_w[std::size_t(i)], conv_b[std::size_t(i)], 2, 1), slope);
      if (i + 1 == spec.local_layer) out.local_map = h;
    }
    const std::size_t batch = h.dim(0);
    h = ag::reshape(h, {batch, h.size() / batch});
    out.z = fc(h);
    return out;
  }
};

/// Residual 1x1x1 block: path A = conv -> ReLU -> conv, path B = conv initialized to identity.
template <class T>
struct LocalHead {
  LinearLayer<T> a1, a2, b;

  Var<T> operator()(const Var<T>& locals) const {
    if (locals.rank() != 3 || int(locals.dim(2)) != a1.in_dim())
      throw ConfigError("local head: expected [B,S," + std::to_string(a1.in_dim()) + "] locals, got " +
                        ag::to_string(locals.shape()));
    const std::size_t batch = locals.dim(0), s = locals.dim(1), c = locals.dim(2);
    Var<T> flat = ag::reshape(locals, {batch * s, c});
    Var<T> pa = a2(ag::relu(a1(flat)));
    Var<T> out = ag::add(pa, b(flat));
    return ag::reshape(out, {batch, s, std::size_t(b.out_dim())});
  }
};

template <class T>
struct GlobalHead {
  std::vector<LinearLayer<T>> layers;  // empty: identity

  Var<T> operator()(const Var<T>& z) const {
    Var<T> h = z;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (int(h.dim(1)) != layers[i].in_dim())
        throw ConfigError("global head: expected input width " + std::to_string(layers[i].in_dim()) + ", got " +
                          std::to_string(h.dim(1)));
      h = layers[i](h);
      if (i + 1 < layers.size()) h = ag::relu(h);
    }
    return h;
  }
};

template <class T>
struct Decoder {
  EncoderSpec spec;
  LinearLayer<T> fc;
  std::vector<Var<T>> deconv_w, deconv_b;

  Var<T> operator()(const Var<T>& z) const {
    if (z.rank() != 2 || int(z.dim(1)) != spec.repr_dim)
      throw ConfigError("decoder: expected [B," + std::to_string(spec.repr_dim) + "] input");
    const std::size_t batch = z.dim(0), fs = std::size_t(spec.final_side());
    Var<T> h = fc(z);
    h = ag::relu(ag::reshape(h, {batch, std::size_t(spec.channels.back()), fs, fs, fs}));
    for (std::size_t i = 0; i < deconv_w.size(); ++i) {
      h = ag::conv_transpose3d(h, deconv_w[i], deconv_b[i], 2, 1);
      h = i + 1 < deconv_w.size() ? ag::relu(h) : ag::sigmoid(h);
    }
    return h;
  }
};

template <class T>
struct ModalityModel {
  Encoder<T> encoder;
  std::optional<LocalHead<T>> local_head;
  std::optional<GlobalHead<T>> global_head;
  std::optional<Decoder<T>> decoder;
  std::optional<LinearLayer<T>> classifier;
};

template <class T>
struct MultimodalModel {
  ModelSpec spec;
  std::array<ModalityModel<T>, 2> nets;
  ParameterSet<T> params;
};

/// Xavier-uniform initialization with activation gains; local path B starts as identity.
template <class T>
MultimodalModel<T> build_model(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  const EncoderSpec& es = spec.encoder;
  MultimodalModel<T> model;
  model.spec = spec;
  const int k3 = es.kernel * es.kernel * es.kernel;
  const double leaky_gain = activation_gain_leaky(es.leaky_slope);
  const double relu_gain = std::sqrt(2.0);
  for (int m = 0; m < 2; ++m) {
    Rng rng = make_rng(seed, 0x3e11 + std::uint64_t(m));
    auto& ps = model.params;
    auto& net = model.nets[std::size_t(m)];
    const std::string pre = "m" + std::to_string(m + 1) + ".";
    net.encoder.spec = es;
    int cin = 1;
    for (int i = 0; i < es.n_layers(); ++i) {
      const int cout = es.channels[std::size_t(i)];
      const std::string nm = pre + "encoder.conv" + std::to_string(i);
      net.encoder.conv_w.push_back(ps.add(nm + ".weight",
                                          {std::size_t(cout), std::size_t(cin), std::size_t(es.kernel),
                                           std::size_t(es.kernel), std::size_t(es.kernel)},
                                          model_detail::xavier_uniform<T>(std::size_t(cout) * cin * k3, double(cin) * k3,
                                                                          double(cout) * k3, leaky_gain, rng)));
      net.encoder.conv_b.push_back(ps.add(nm + ".bias", {std::size_t(cout)}, std::vector<T>(std::size_t(cout), T(0))));
      cin = cout;
    }
    const int flat = es.channels.back() * es.final_side() * es.final_side() * es.final_side();
    net.encoder.fc = LinearLayer<T>::make(ps, pre + "encoder.fc", flat, es.repr_dim, 1.0, rng);

    if (spec.with_local_head) {
      const int c = es.local_channels(), d = es.repr_dim;
      LocalHead<T> head;
      head.a1 = LinearLayer<T>::make(ps, pre + "local.a1", c, spec.local.hidden, relu_gain, rng);
      head.a2 = LinearLayer<T>::make(ps, pre + "local.a2", spec.local.hidden, d, 1.0, rng);
      std::vector<T> eye(std::size_t(d) * c, T(0));
      for (int i = 0; i < std::min(c, d); ++i) eye[std::size_t(i) * c + i] = T(1);
      head.b.weight = ps.add(pre + "local.b.weight", {std::size_t(d), std::size_t(c)}, std::move(eye));
      head.b.bias = ps.add(pre + "local.b.bias", {std::size_t(d)}, std::vector<T>(std::size_t(d), T(0)));
      net.local_head = std::move(head);
    }
    if (spec.with_global_head && spec.global.hidden_layers >= 0) {
      GlobalHead<T> head;
      int in = es.repr_dim;
      for (int h = 0; h < spec.global.hidden_layers; ++h) {
        head.layers.push_back(LinearLayer<T>::make(ps, pre + "global.l" + std::to_string(h), in, spec.global.width,
                                                   relu_gain, rng));
        in = spec.global.width;
      }
      head.layers.push_back(LinearLayer<T>::make(ps, pre + "global.out", in, es.repr_dim, 1.0, rng));
      net.global_head = std::move(head);
    } else if (spec.with_global_head) {
      net.global_head = GlobalHead<T>{};
    }
    if (spec.with_decoder) {
      Decoder<T> dec;
      dec.spec = es;
      dec.fc = LinearLayer<T>::make(ps, pre + "decoder.fc", es.repr_dim, flat, relu_gain, rng);
      for (int i = es.n_layers() - 1; i >= 0; --i) {
        const int c_in = es.channels[std::size_t(i)];
        const int c_out = i == 0 ? 1 : es.channels[std::size_t(i - 1)];
        const std::string nm = pre + "decoder.deconv" + std::to_string(es.n_layers() - 1 - i);
        const double gain = i == 0 ? 1.0 : relu_gain;
        dec.deconv_w.push_back(ps.add(nm + ".weight",
                                      {std::size_t(c_in), std::size_t(c_out), std::size_t(es.kernel),
                                       std::size_t(es.kernel), std::size_t(es.kernel)},
                                      model_detail::xavier_uniform<T>(std::size_t(c_in) * c_out * k3, double(c_out) * k3,
                                                                      double(c_in) * k3, gain, rng)));
        dec.deconv_b.push_back(ps.add(nm + ".bias", {std::size_t(c_out)}, std::vector<T>(std::size_t(c_out), T(0))));
      }
      net.decoder = std::move(dec);
    }
    if (spec.n_classes > 0)
      net.classifier = LinearLayer<T>::make(ps, pre + "classifier", es.repr_dim, spec.n_classes, 1.0, rng);
  }
  return model;
}

// ---------------------------------------------------------------------------
// Convenience wrappers named after the operations they realize.

template <class T>
ForwardOutputs<T> forward(const Encoder<T>& enc, const Var<T>& batch) {
  return enc.forward(batch);
}

template <class T>
Var<T> project_local(const LocalHead<T>& head, const Var<T>& locals) {
  return head(locals);
}

template <class T>
Var<T> project_global(const GlobalHead<T>& head, const Var<T>& z) {
  return head(z);
}

template <class T>
Var<T> decode(const Decoder<T>& dec, const Var<T>& z) {
  return dec(z);
}

/// Stacks volumes into a [B,1,side,side,side] tensor.
template <class T>
Var<T> make_batch(const std::vector<const Volume*>& vols, bool requires_grad = false) {
  if (vols.empty()) throw ConfigError("make_batch: empty batch");
  const auto dims = vols.front()->dims;
  std::vector<T> data;
  data.reserve(vols.size() * vols.front()->size());
  for (const Volume* v : vols) {
    if (v->dims != dims) throw DataError("make_batch: volumes differ in shape");
    for (float x : v->data) data.push_back(static_cast<T>(x));
  }
  return Var<T>::leaf({vols.size(), 1, dims[0], dims[1], dims[2]}, std::move(data), requires_grad);
}

}  // namespace mscl
