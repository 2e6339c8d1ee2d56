#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rvox/conv3d.hpp"
#include "rvox/loss.hpp"
#include "rvox/rng.hpp"
#include "rvox/tensor.hpp"
#include "rvox/volume.hpp"

namespace rvox::net {

enum class Activation { Identity, ReLU, LeakyReLU02, Sigmoid };

const char* activation_name(Activation a);
Activation activation_from_name(const std::string& s);

template <typename T>
void activate_inplace(Tensor<T>& t, Activation a) {
  switch (a) {
    case Activation::Identity:
      return;
    case Activation::ReLU:
      for (auto& v : t.data) v = v > T(0) ? v : T(0);
      return;
    case Activation::LeakyReLU02:
      for (auto& v : t.data) v = v > T(0) ? v : T(0.2) * v;
      return;
    case Activation::Sigmoid:
      for (auto& v : t.data) v = T(1) / (T(1) + std::exp(-v));
      return;
  }
}

// Upstream grad times act'(pre), recovered from the post-activation value
// (exact for all four activations).
template <typename T>
Tensor<T> activation_backward(const Tensor<T>& g, const Tensor<T>& post,
                              Activation a) {
  if (g.shape != post.shape)
    throw DomainError("shape error: activation grad mismatch");
  Tensor<T> out = g;
  switch (a) {
    case Activation::Identity:
      break;
    case Activation::ReLU:
      for (std::size_t i = 0; i < out.data.size(); ++i)
        if (!(post.data[i] > T(0))) out.data[i] = T(0);
      break;
    case Activation::LeakyReLU02:
      for (std::size_t i = 0; i < out.data.size(); ++i)
        if (!(post.data[i] > T(0))) out.data[i] *= T(0.2);
      break;
    case Activation::Sigmoid:
      for (std::size_t i = 0; i < out.data.size(); ++i)
        out.data[i] *= post.data[i] * (T(1) - post.data[i]);
      break;
  }
  return out;
}

template <typename T>
struct ConvLayer {
  ConvSpec spec;
  Activation act = Activation::Identity;
  Tensor<T> w, b;
};

template <typename T>
Tensor<T> layer_forward(const ConvLayer<T>& L, const Tensor<T>& x) {
  Tensor<T> out = L.spec.transposed ? deconv3d_forward(x, L.spec, L.w, L.b)
                                    : conv3d_forward(x, L.spec, L.w, L.b);
  activate_inplace(out, L.act);
  return out;
}

// Returns parameter grads and the grad wrt the layer input.
template <typename T>
ConvGrads<T> layer_backward(const ConvLayer<T>& L, const Tensor<T>& input,
                            const Tensor<T>& post, const Tensor<T>& g) {
  Tensor<T> gp = activation_backward(g, post, L.act);
  return L.spec.transposed ? deconv3d_backward(input, L.spec, L.w, gp)
                           : conv3d_backward(input, L.spec, L.w, gp);
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape.size() != 5 || b.shape.size() != 5)
    throw DomainError("shape error: concat expects 5-axis tensors");
  for (int ax : {0, 2, 3, 4})
    if (a.shape[std::size_t(ax)] != b.shape[std::size_t(ax)])
      throw DomainError("shape error: concat operands disagree");
  Tensor<T> out({a.shape[0], a.shape[1] + b.shape[1], a.shape[2], a.shape[3],
                 a.shape[4]});
  const std::size_t plane = std::size_t(a.shape[2] * a.shape[3] * a.shape[4]);
  const std::size_t ca = std::size_t(a.shape[1]), cb = std::size_t(b.shape[1]);
  for (std::int64_t n = 0; n < a.shape[0]; ++n) {
    const std::size_t base = std::size_t(n) * (ca + cb) * plane;
    std::copy_n(&a.data[std::size_t(n) * ca * plane], ca * plane,
                &out.data[base]);
    std::copy_n(&b.data[std::size_t(n) * cb * plane], cb * plane,
                &out.data[base + ca * plane]);
  }
  return out;
}

template <typename T>
void split_channels(const Tensor<T>& g, std::int64_t ca, Tensor<T>& ga,
                    Tensor<T>& gb) {
  const std::int64_t cb = g.shape[1] - ca;
  if (ca < 1 || cb < 1) throw DomainError("shape error: bad channel split");
  ga = Tensor<T>({g.shape[0], ca, g.shape[2], g.shape[3], g.shape[4]});
  gb = Tensor<T>({g.shape[0], cb, g.shape[2], g.shape[3], g.shape[4]});
  const std::size_t plane = std::size_t(g.shape[2] * g.shape[3] * g.shape[4]);
  for (std::int64_t n = 0; n < g.shape[0]; ++n) {
    const std::size_t base = std::size_t(n) * std::size_t(ca + cb) * plane;
    std::copy_n(&g.data[base], std::size_t(ca) * plane,
                &ga.data[std::size_t(n) * std::size_t(ca) * plane]);
    std::copy_n(&g.data[base + std::size_t(ca) * plane],
                std::size_t(cb) * plane,
                &gb.data[std::size_t(n) * std::size_t(cb) * plane]);
  }
}

// ---------------------------------------------------------------------------
// Generator: encoder-decoder with optional skip concatenations.
// ---------------------------------------------------------------------------

struct GeneratorConfig {
  int in_channels = 1;
  int out_channels = 1;
  int depth = 2;          // number of down/up levels
  int base_channels = 8;  // channels after the stem; doubles per level
  std::array<int, 3> conv_kernel{3, 3, 3};
  int down_stride = 2;
  std::array<int, 3> up_kernel{4, 4, 4};
  bool skip_connections = true;
  Activation final_activation = Activation::Identity;

  bool operator==(const GeneratorConfig&) const = default;
};

template <typename T>
struct Generator {
  GeneratorConfig cfg;
  ConvLayer<T> stem;
  std::vector<ConvLayer<T>> down;  // down[d]: level d -> d+1
  std::vector<ConvLayer<T>> up;    // up[d]: level d+1 -> d (applied high to low)
  ConvLayer<T> head;
};

// Layer specs implied by a config; validates the config.
std::vector<ConvSpec> generator_layer_specs(const GeneratorConfig& cfg);
std::size_t parameter_count(const GeneratorConfig& cfg);

template <typename T>
struct GeneratorTrace {
  Tensor<T> input;
  std::vector<Tensor<T>> enc;  // e[0..depth], post-activation
  std::vector<Tensor<T>> dec;  // t[d], post-activation deconv outputs
  std::vector<Tensor<T>> cat;  // concat(t[d], e[d]) when skips are on
  Tensor<T> output;
};

template <typename T, typename F>
void for_each_param(Generator<T>& g, F&& f) {
  f("g.stem.w", g.stem.w);
  f("g.stem.b", g.stem.b);
  for (std::size_t d = 0; d < g.down.size(); ++d) {
    f("g.down" + std::to_string(d) + ".w", g.down[d].w);
    f("g.down" + std::to_string(d) + ".b", g.down[d].b);
  }
  for (std::size_t d = 0; d < g.up.size(); ++d) {
    f("g.up" + std::to_string(d) + ".w", g.up[d].w);
    f("g.up" + std::to_string(d) + ".b", g.up[d].b);
  }
  f("g.head.w", g.head.w);
  f("g.head.b", g.head.b);
}

template <typename T, typename F>
void for_each_param(const Generator<T>& g, F&& f) {
  for_each_param(const_cast<Generator<T>&>(g),
                 [&](const std::string& n, Tensor<T>& t) {
                   f(n, static_cast<const Tensor<T>&>(t));
                 });
}

template <typename T>
std::vector<Tensor<T>*> param_list(Generator<T>& g) {
  std::vector<Tensor<T>*> out;
  for_each_param(g, [&](const std::string&, Tensor<T>& t) { out.push_back(&t); });
  return out;
}

// ---------------------------------------------------------------------------
// Discriminator: a stack of conv layers over [condition, candidate],
// LeakyReLU(0.2) between layers, sigmoid patch map out. The default is the
// reference four-layer stack with 4x4x4 kernels; gradient checks shrink it.
// ---------------------------------------------------------------------------

struct DiscriminatorConfig {
  int in_channels = 2;  // condition channels + candidate channels
  std::vector<int> widths{8, 16, 32};     // hidden widths; final layer emits 1
  std::vector<int> strides{2, 2, 2, 1};   // one per layer; size = widths+1
  std::array<int, 3> kernel{4, 4, 4};
  int padding = 1;

  int layer_count() const { return int(strides.size()); }

  bool operator==(const DiscriminatorConfig&) const = default;
};

template <typename T>
struct Discriminator {
  DiscriminatorConfig cfg;
  std::vector<ConvLayer<T>> layers;
};

std::vector<ConvSpec> discriminator_layer_specs(const DiscriminatorConfig& cfg);
std::size_t parameter_count(const DiscriminatorConfig& cfg);

template <typename T>
struct DiscriminatorTrace {
  Tensor<T> input;  // concatenated [condition, candidate]
  std::vector<Tensor<T>> post;
};

template <typename T, typename F>
void for_each_param(Discriminator<T>& d, F&& f) {
  for (std::size_t i = 0; i < d.layers.size(); ++i) {
    f("d.layer" + std::to_string(i) + ".w", d.layers[i].w);
    f("d.layer" + std::to_string(i) + ".b", d.layers[i].b);
  }
}

template <typename T, typename F>
void for_each_param(const Discriminator<T>& d, F&& f) {
  for_each_param(const_cast<Discriminator<T>&>(d),
                 [&](const std::string& n, Tensor<T>& t) {
                   f(n, static_cast<const Tensor<T>&>(t));
                 });
}

template <typename T>
std::vector<Tensor<T>*> param_list(Discriminator<T>& d) {
  std::vector<Tensor<T>*> out;
  for_each_param(d, [&](const std::string&, Tensor<T>& t) { out.push_back(&t); });
  return out;
}

// ---------------------------------------------------------------------------
// Construction / initialization
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void init_layer(ConvLayer<T>& L, std::uint64_t seed) {
  L.w = Tensor<T>(weight_shape(L.spec));
  L.b = Tensor<T>(bias_shape(L.spec));
  // He-style fan-in uniform: U(-sqrt(6/fan_in), +sqrt(6/fan_in)), bias zero.
  const double fan_in = double(L.spec.in_channels) * L.spec.kernel[0] *
                        L.spec.kernel[1] * L.spec.kernel[2];
  const double bound = std::sqrt(6.0 / fan_in);
  Rng rng(seed);
  for (auto& v : L.w.data) v = T(rng.uniform(-bound, bound));
}

}  // namespace detail

template <typename T>
Generator<T> make_generator(const GeneratorConfig& cfg, std::uint64_t seed) {
  const auto specs = generator_layer_specs(cfg);
  Generator<T> g;
  g.cfg = cfg;
  std::size_t li = 0;
  auto next = [&](Activation act) {
    ConvLayer<T> L;
    L.spec = specs[li];
    L.act = act;
    detail::init_layer(L, Rng::split(seed, li));
    ++li;
    return L;
  };
  g.stem = next(Activation::ReLU);
  for (int d = 0; d < cfg.depth; ++d) g.down.push_back(next(Activation::ReLU));
  for (int d = 0; d < cfg.depth; ++d) g.up.push_back(next(Activation::ReLU));
  g.head = next(cfg.final_activation);
  return g;
}

template <typename T>
Discriminator<T> make_discriminator(const DiscriminatorConfig& cfg,
                                    std::uint64_t seed) {
  const auto specs = discriminator_layer_specs(cfg);
  Discriminator<T> d;
  d.cfg = cfg;
  d.layers.resize(specs.size());
  for (std::size_t i = 0; i < specs.size(); ++i) {
    d.layers[i].spec = specs[i];
    d.layers[i].act =
        i + 1 == specs.size() ? Activation::Sigmoid : Activation::LeakyReLU02;
    detail::init_layer(d.layers[i], Rng::split(seed, i));
  }
  return d;
}

template <typename M>
M zero_grads_of(const M& model) {
  M out = model;
  for_each_param(out, [](const std::string&, auto& t) { t.fill(0); });
  return out;
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> generator_forward(const Generator<T>& G, const Tensor<T>& x,
                            GeneratorTrace<T>* trace = nullptr) {
  if (x.shape.size() != 5 || x.shape[1] != G.cfg.in_channels)
    throw DomainError("shape error: generator input channels");
  const std::int64_t div = std::int64_t(1) << G.cfg.depth;
  for (int a = 2; a < 5; ++a)
    if (x.shape[std::size_t(a)] % div != 0)
      throw DomainError("shape error: input dims must be divisible by 2^depth");

  const int D = G.cfg.depth;
  std::vector<Tensor<T>> enc;
  enc.reserve(std::size_t(D) + 1);
  enc.push_back(layer_forward(G.stem, x));
  for (int d = 0; d < D; ++d) enc.push_back(layer_forward(G.down[std::size_t(d)], enc.back()));

  std::vector<Tensor<T>> dec(static_cast<std::size_t>(D));
  std::vector<Tensor<T>> cat(static_cast<std::size_t>(D));
  const Tensor<T>* cur = &enc.back();
  for (int d = D - 1; d >= 0; --d) {
    dec[std::size_t(d)] = layer_forward(G.up[std::size_t(d)], *cur);
    if (G.cfg.skip_connections) {
      cat[std::size_t(d)] = concat_channels(dec[std::size_t(d)], enc[std::size_t(d)]);
      cur = &cat[std::size_t(d)];
    } else {
      cur = &dec[std::size_t(d)];
    }
  }
  Tensor<T> out = layer_forward(G.head, *cur);

  if (trace) {
    trace->input = x;
    trace->enc = std::move(enc);
    trace->dec = std::move(dec);
    trace->cat = std::move(cat);
    trace->output = out;
  }
  return out;
}

// Parameter grads plus grad wrt the generator input.
template <typename T>
std::pair<Generator<T>, Tensor<T>> generator_backward(
    const Generator<T>& G, const GeneratorTrace<T>& tr,
    const Tensor<T>& grad_output) {
  const int D = G.cfg.depth;
  const bool skip = G.cfg.skip_connections;
  Generator<T> grads = zero_grads_of(G);

  // pending gradient on each encoder feature (skip + bottleneck paths)
  std::vector<Tensor<T>> g_enc(static_cast<std::size_t>(D) + 1);
  for (int d = 0; d <= D; ++d) g_enc[std::size_t(d)] = zeros_like(tr.enc[std::size_t(d)]);

  const Tensor<T>& head_in = skip ? tr.cat[0] : tr.dec[0];
  ConvGrads<T> hg = layer_backward(G.head, head_in, tr.output, grad_output);
  grads.head.w = std::move(hg.weight);
  grads.head.b = std::move(hg.bias);

  Tensor<T> g_level = std::move(hg.input);  // grad wrt head_in
  for (int d = 0; d < D; ++d) {
    Tensor<T> g_t;
    if (skip) {
      Tensor<T> g_skip;
      split_channels(g_level, tr.dec[std::size_t(d)].shape[1], g_t, g_skip);
      for (std::size_t i = 0; i < g_skip.data.size(); ++i)
        g_enc[std::size_t(d)].data[i] += g_skip.data[i];
    } else {
      g_t = std::move(g_level);
    }
    const Tensor<T>& up_in = d == D - 1 ? tr.enc[std::size_t(D)]
                             : (skip ? tr.cat[std::size_t(d) + 1] : tr.dec[std::size_t(d) + 1]);
    ConvGrads<T> ug = layer_backward(G.up[std::size_t(d)], up_in, tr.dec[std::size_t(d)], g_t);
    grads.up[std::size_t(d)].w = std::move(ug.weight);
    grads.up[std::size_t(d)].b = std::move(ug.bias);
    if (d == D - 1) {
      for (std::size_t i = 0; i < ug.input.data.size(); ++i)
        g_enc[std::size_t(D)].data[i] += ug.input.data[i];
    } else {
      g_level = std::move(ug.input);
    }
  }

  for (int d = D; d >= 1; --d) {
    const ConvLayer<T>& L = G.down[std::size_t(d) - 1];
    ConvGrads<T> dg = layer_backward(L, tr.enc[std::size_t(d) - 1],
                                     tr.enc[std::size_t(d)], g_enc[std::size_t(d)]);
    grads.down[std::size_t(d) - 1].w = std::move(dg.weight);
    grads.down[std::size_t(d) - 1].b = std::move(dg.bias);
    for (std::size_t i = 0; i < dg.input.data.size(); ++i)
      g_enc[std::size_t(d) - 1].data[i] += dg.input.data[i];
  }

  ConvGrads<T> sg = layer_backward(G.stem, tr.input, tr.enc[0], g_enc[0]);
  grads.stem.w = std::move(sg.weight);
  grads.stem.b = std::move(sg.bias);
  return {std::move(grads), std::move(sg.input)};
}

template <typename T>
Tensor<T> discriminator_forward(const Discriminator<T>& D,
                                const Tensor<T>& condition,
                                const Tensor<T>& candidate,
                                DiscriminatorTrace<T>* trace = nullptr) {
  if (condition.shape != candidate.shape)
    throw DomainError("shape error: condition and candidate differ");
  Tensor<T> x = concat_channels(condition, candidate);
  if (x.shape[1] != D.cfg.in_channels)
    throw DomainError("shape error: discriminator input channels");
  DiscriminatorTrace<T> local;
  local.input = x;
  local.post.resize(D.layers.size());
  const Tensor<T>* cur = &local.input;
  for (std::size_t i = 0; i < D.layers.size(); ++i) {
    local.post[i] = layer_forward(D.layers[i], *cur);
    cur = &local.post[i];
  }
  Tensor<T> out = local.post.back();
  if (trace) *trace = std::move(local);
  return out;
}

// Parameter grads plus grad wrt the concatenated input.
template <typename T>
std::pair<Discriminator<T>, Tensor<T>> discriminator_backward(
    const Discriminator<T>& D, const DiscriminatorTrace<T>& tr,
    const Tensor<T>& grad_map) {
  Discriminator<T> grads = zero_grads_of(D);
  Tensor<T> g = grad_map;
  for (int i = int(D.layers.size()) - 1; i >= 0; --i) {
    const Tensor<T>& input = i == 0 ? tr.input : tr.post[std::size_t(i) - 1];
    ConvGrads<T> cg =
        layer_backward(D.layers[std::size_t(i)], input, tr.post[std::size_t(i)], g);
    grads.layers[std::size_t(i)].w = std::move(cg.weight);
    grads.layers[std::size_t(i)].b = std::move(cg.bias);
    g = std::move(cg.input);
  }
  return {std::move(grads), std::move(g)};
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  bool operator==(const AdamConfig&) const = default;
};

template <typename T>
struct AdamState {
  AdamConfig cfg;
  std::int64_t step = 0;
  std::vector<std::vector<T>> m, v;
};

template <typename T>
void adam_step(std::vector<Tensor<T>*> params,
               const std::vector<const Tensor<T>*>& grads, AdamState<T>& st) {
  if (params.size() != grads.size())
    throw DomainError("shape error: param/grad list mismatch");
  if (st.m.empty()) {
    st.m.resize(params.size());
    st.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      st.m[i].assign(params[i]->data.size(), T(0));
      st.v[i].assign(params[i]->data.size(), T(0));
    }
  }
  st.step += 1;
  const double b1 = st.cfg.beta1, b2 = st.cfg.beta2;
  const double bc1 = 1.0 - std::pow(b1, double(st.step));
  const double bc2 = 1.0 - std::pow(b2, double(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i]->data;
    const auto& g = grads[i]->data;
    if (p.size() != g.size() || p.size() != st.m[i].size())
      throw DomainError("shape error: adam buffer mismatch");
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double gk = double(g[k]);
      const double mk = b1 * double(st.m[i][k]) + (1.0 - b1) * gk;
      const double vk = b2 * double(st.v[i][k]) + (1.0 - b2) * gk * gk;
      st.m[i][k] = T(mk);
      st.v[i][k] = T(vk);
      const double mhat = mk / bc1;
      const double vhat = vk / bc2;
      p[k] = T(double(p[k]) - st.cfg.lr * mhat / (std::sqrt(vhat) + st.cfg.eps));
    }
  }
}

// ---------------------------------------------------------------------------
// Objectives (value + exact grads); these are what the train step and the
// finite-difference checks share.
// ---------------------------------------------------------------------------

struct TrainStepOptions {
  loss::LossWeights weights{};
  loss::AdvMode adv_mode = loss::AdvMode::NonSaturating;
  bool use_l2 = false;      // reconstruction arm: false -> L1, true -> L2
  bool adversarial = true;  // when false, objective is lambda * recon only
};

// d(adv_g)/d(map entry), consistent with the clamped value in loss::adv_loss_g.
template <typename T>
Tensor<T> adv_g_grad_map(const Tensor<T>& d_fake, loss::AdvMode mode) {
  Tensor<T> g = zeros_like(d_fake);
  const double P = double(d_fake.numel());
  for (std::size_t i = 0; i < g.data.size(); ++i) {
    const double d = double(d_fake.data[i]);
    if (d < loss::kLogEps || d > 1.0 - loss::kLogEps) continue;  // clamped flat
    g.data[i] = T(mode == loss::AdvMode::Minimax ? -1.0 / ((1.0 - d) * P)
                                                 : -1.0 / (d * P));
  }
  return g;
}

// Reconstruction grad wrt g: d(mean|y-g|)/dg or d(mean(y-g)^2)/dg.
template <typename T>
Tensor<T> recon_grad(const Tensor<T>& y, const Tensor<T>& g_out, bool use_l2) {
  if (y.shape != g_out.shape)
    throw DomainError("shape error: reconstruction operands differ");
  Tensor<T> g = zeros_like(g_out);
  const double N = double(g_out.numel());
  for (std::size_t i = 0; i < g.data.size(); ++i) {
    const double d = double(g_out.data[i]) - double(y.data[i]);
    g.data[i] = T(use_l2 ? 2.0 * d / N : (d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0)) / N);
  }
  return g;
}

template <typename T>
double recon_value(const Tensor<T>& y, const Tensor<T>& g_out, bool use_l2) {
  std::span<const T> ys(y.data), gs(g_out.data);
  return use_l2 ? loss::l2_loss(ys, gs) : loss::l1_loss(ys, gs);
}

// Generator-side joint objective value, D held fixed. Forward passes only.
template <typename T>
double generator_joint_value(const Generator<T>& G, const Discriminator<T>& D,
                             const Tensor<T>& x, const Tensor<T>& y,
                             const TrainStepOptions& opt) {
  Tensor<T> g_out = generator_forward(G, x);
  double value = opt.weights.lambda * recon_value(y, g_out, opt.use_l2);
  if (opt.adversarial) {
    Tensor<T> d_fake = discriminator_forward(D, x, g_out);
    value += loss::adv_loss_g(std::span<const T>(d_fake.data), opt.adv_mode);
  }
  return value;
}

template <typename T>
struct JointBackwardResult {
  double value = 0;
  double adv_g = 0;
  double recon = 0;  // the arm named by the options
  double l1 = 0, l2 = 0;
  Generator<T> grads;
};

// Exact parameter gradients of the joint generator objective.
template <typename T>
JointBackwardResult<T> generator_joint_backward(const Generator<T>& G,
                                                const Discriminator<T>& D,
                                                const Tensor<T>& x,
                                                const Tensor<T>& y,
                                                const TrainStepOptions& opt) {
  GeneratorTrace<T> tr;
  Tensor<T> g_out = generator_forward(G, x, &tr);

  JointBackwardResult<T> out;
  out.l1 = recon_value(y, g_out, false);
  out.l2 = recon_value(y, g_out, true);
  out.recon = opt.use_l2 ? out.l2 : out.l1;

  Tensor<T> grad_g_out = recon_grad(y, g_out, opt.use_l2);
  for (auto& v : grad_g_out.data) v *= T(opt.weights.lambda);

  if (opt.adversarial) {
    DiscriminatorTrace<T> dtr;
    Tensor<T> d_fake = discriminator_forward(D, x, g_out, &dtr);
    out.adv_g = loss::adv_loss_g(std::span<const T>(d_fake.data), opt.adv_mode);
    auto [dgrads, g_input] =
        discriminator_backward(D, dtr, adv_g_grad_map(d_fake, opt.adv_mode));
    (void)dgrads;  // D is fixed in the generator step
    Tensor<T> g_cond, g_cand;
    split_channels(g_input, x.shape[1], g_cond, g_cand);
    for (std::size_t i = 0; i < grad_g_out.data.size(); ++i)
      grad_g_out.data[i] += g_cand.data[i];
  }
  out.value = out.adv_g + opt.weights.lambda * out.recon;

  auto [grads, gx] = generator_backward(G, tr, grad_g_out);
  (void)gx;
  out.grads = std::move(grads);
  return out;
}

// Discriminator training loss: the negation of the adversarial objective,
// so minimizing it maximizes the objective.
template <typename T>
double discriminator_loss_value(const Discriminator<T>& D, const Tensor<T>& x,
                                const Tensor<T>& y, const Tensor<T>& g_out) {
  Tensor<T> d_real = discriminator_forward(D, x, y);
  Tensor<T> d_fake = discriminator_forward(D, x, g_out);
  return -loss::adv_loss_d(std::span<const T>(d_real.data),
                           std::span<const T>(d_fake.data));
}

template <typename T>
struct DiscBackwardResult {
  double loss = 0;   // value being minimized
  double adv_d = 0;  // the objective itself (= -loss)
  Discriminator<T> grads;
};

template <typename T>
DiscBackwardResult<T> discriminator_loss_backward(const Discriminator<T>& D,
                                                  const Tensor<T>& x,
                                                  const Tensor<T>& y,
                                                  const Tensor<T>& g_out) {
  DiscriminatorTrace<T> tr_real, tr_fake;
  Tensor<T> d_real = discriminator_forward(D, x, y, &tr_real);
  Tensor<T> d_fake = discriminator_forward(D, x, g_out, &tr_fake);

  DiscBackwardResult<T> out;
  out.adv_d = loss::adv_loss_d(std::span<const T>(d_real.data),
                               std::span<const T>(d_fake.data));
  out.loss = -out.adv_d;

  // d(-adv_d)/d(d_real) = -1/(d*P); d(-adv_d)/d(d_fake) = 1/((1-d)*P)
  Tensor<T> g_real = zeros_like(d_real);
  Tensor<T> g_fake = zeros_like(d_fake);
  const double P = double(d_real.numel());
  for (std::size_t i = 0; i < g_real.data.size(); ++i) {
    const double dr = double(d_real.data[i]);
    if (dr >= loss::kLogEps && dr <= 1.0 - loss::kLogEps)
      g_real.data[i] = T(-1.0 / (dr * P));
    const double df = double(d_fake.data[i]);
    if (df >= loss::kLogEps && df <= 1.0 - loss::kLogEps)
      g_fake.data[i] = T(1.0 / ((1.0 - df) * P));
  }
  auto [grads_r, gi_r] = discriminator_backward(D, tr_real, g_real);
  auto [grads_f, gi_f] = discriminator_backward(D, tr_fake, g_fake);
  (void)gi_r;
  (void)gi_f;
  // sum the two branches
  auto pr = param_list(grads_r);
  auto pf = param_list(grads_f);
  for (std::size_t i = 0; i < pr.size(); ++i)
    for (std::size_t k = 0; k < pr[i]->data.size(); ++k)
      pr[i]->data[k] += pf[i]->data[k];
  out.grads = std::move(grads_r);
  return out;
}

// One D update (when adversarial) followed by one G update.
template <typename T>
loss::LossReport gan_train_step(const Tensor<T>& x, const Tensor<T>& y,
                                Generator<T>& G, Discriminator<T>& D,
                                AdamState<T>& g_opt, AdamState<T>& d_opt,
                                const TrainStepOptions& opt) {
  loss::LossReport report;

  if (opt.adversarial) {
    Tensor<T> g_out = generator_forward(G, x);  // detached fake for the D step
    auto dres = discriminator_loss_backward(D, x, y, g_out);
    report.adv_d = dres.adv_d;
    auto dparams = param_list(D);
    auto dgrads = param_list(dres.grads);
    std::vector<const Tensor<T>*> cgrads(dgrads.begin(), dgrads.end());
    adam_step(dparams, cgrads, d_opt);
  }

  auto gres = generator_joint_backward(G, D, x, y, opt);
  report.adv_g = gres.adv_g;
  report.joint = gres.value;
  report.l1 = gres.l1;
  report.l2 = gres.l2;

  auto gparams = param_list(G);
  auto ggrads = param_list(gres.grads);
  std::vector<const Tensor<T>*> cgrads(ggrads.begin(), ggrads.end());
  adam_step(gparams, cgrads, g_opt);
  return report;
}

// ---------------------------------------------------------------------------
// Segmentation head + loss (transfer learning)
// ---------------------------------------------------------------------------

// Fresh 1x1x1 head emitting num_classes logits; everything else copied.
Generator<float> replace_head(const Generator<float>& g, int num_classes,
                              std::uint64_t seed);

template <typename T>
struct SegLossResult {
  double value = 0;
  Tensor<T> grad_logits;
};

// Voxel-wise softmax cross-entropy; labels flat over [n, z, y, x].
template <typename T>
SegLossResult<T> softmax_cross_entropy(const Tensor<T>& logits,
                                       std::span<const std::int32_t> labels) {
  if (logits.shape.size() != 5)
    throw DomainError("shape error: logits must be 5-axis");
  const std::int64_t N = logits.shape[0], K = logits.shape[1];
  const std::int64_t S = logits.shape[2] * logits.shape[3] * logits.shape[4];
  if (std::int64_t(labels.size()) != N * S)
    throw DomainError("shape error: label count mismatch");
  SegLossResult<T> out;
  out.grad_logits = zeros_like(logits);
  double total = 0;
  const double M = double(N * S);
  std::vector<double> prob(static_cast<std::size_t>(K));
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t s = 0; s < S; ++s) {
      const std::int32_t lab = labels[std::size_t(n * S + s)];
      if (lab < 0 || lab >= K) throw DomainError("bad label: out of range");
      double mx = -1e300;
      for (std::int64_t k = 0; k < K; ++k)
        mx = std::max(mx, double(logits.data[std::size_t((n * K + k) * S + s)]));
      double z = 0;
      for (std::int64_t k = 0; k < K; ++k) {
        prob[std::size_t(k)] =
            std::exp(double(logits.data[std::size_t((n * K + k) * S + s)]) - mx);
        z += prob[std::size_t(k)];
      }
      for (std::int64_t k = 0; k < K; ++k) prob[std::size_t(k)] /= z;
      total += -std::log(std::max(prob[std::size_t(lab)], 1e-300));
      for (std::int64_t k = 0; k < K; ++k) {
        const double onehot = k == lab ? 1.0 : 0.0;
        out.grad_logits.data[std::size_t((n * K + k) * S + s)] =
            T((prob[std::size_t(k)] - onehot) / M);
      }
    }
  out.value = total / M;
  return out;
}

template <typename T>
std::vector<std::int32_t> argmax_labels(const Tensor<T>& logits) {
  const std::int64_t N = logits.shape[0], K = logits.shape[1];
  const std::int64_t S = logits.shape[2] * logits.shape[3] * logits.shape[4];
  std::vector<std::int32_t> out(static_cast<std::size_t>(N * S));
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t s = 0; s < S; ++s) {
      std::int32_t best = 0;
      double bv = double(logits.data[std::size_t((n * K + 0) * S + s)]);
      for (std::int64_t k = 1; k < K; ++k) {
        const double v = double(logits.data[std::size_t((n * K + k) * S + s)]);
        if (v > bv) {
          bv = v;
          best = std::int32_t(k);
        }
      }
      out[std::size_t(n * S + s)] = best;
    }
  return out;
}

template <typename T>
double seg_train_step(const Tensor<T>& x, std::span<const std::int32_t> labels,
                      Generator<T>& G, AdamState<T>& opt) {
  GeneratorTrace<T> tr;
  Tensor<T> logits = generator_forward(G, x, &tr);
  auto seg = softmax_cross_entropy(logits, labels);
  auto [grads, gx] = generator_backward(G, tr, seg.grad_logits);
  (void)gx;
  auto params = param_list(G);
  auto glist = param_list(grads);
  std::vector<const Tensor<T>*> cgrads(glist.begin(), glist.end());
  adam_step(params, cgrads, opt);
  return seg.value;
}

// ---------------------------------------------------------------------------
// Volume <-> Tensor bridges (layouts are memcpy-compatible)
// ---------------------------------------------------------------------------

Tensor<float> to_tensor(const Volume& v);
Tensor<float> stack_to_tensor(const std::vector<const Volume*>& batch);
Volume to_volume(const Tensor<float>& t, std::int64_t batch_index = 0);

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
  std::int64_t training_step = 0;
  std::string loss_digest;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  Generator<float> generator;
  std::optional<Discriminator<float>> discriminator;
  std::optional<AdamState<float>> g_opt, d_opt;
  std::uint64_t rng_state = 0;
  CheckpointMeta meta;
};

void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace rvox::net
