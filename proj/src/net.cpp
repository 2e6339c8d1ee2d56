#include "rvox/net.hpp"

#include <cstring>
#include <fstream>

#include "json.hpp"
#include "rvox/error.hpp"

namespace rvox::net {

namespace {

using nlohmann::json;

int same_padding(const std::array<int, 3>& k) {
  if (k[0] != k[1] || k[1] != k[2])
    throw DomainError("generator kernels must be isotropic");
  if (k[0] % 2 == 0)
    throw DomainError("generator conv kernel must be odd for same padding");
  return (k[0] - 1) / 2;
}

json config_to_json(const GeneratorConfig& c) {
  return json{{"in_channels", c.in_channels},
              {"out_channels", c.out_channels},
              {"depth", c.depth},
              {"base_channels", c.base_channels},
              {"conv_kernel", c.conv_kernel},
              {"down_stride", c.down_stride},
              {"up_kernel", c.up_kernel},
              {"skip_connections", c.skip_connections},
              {"final_activation", activation_name(c.final_activation)}};
}

GeneratorConfig generator_config_from_json(const json& j) {
  GeneratorConfig c;
  c.in_channels = j.at("in_channels").get<int>();
  c.out_channels = j.at("out_channels").get<int>();
  c.depth = j.at("depth").get<int>();
  c.base_channels = j.at("base_channels").get<int>();
  for (int a = 0; a < 3; ++a) {
    c.conv_kernel[std::size_t(a)] = j.at("conv_kernel").at(std::size_t(a)).get<int>();
    c.up_kernel[std::size_t(a)] = j.at("up_kernel").at(std::size_t(a)).get<int>();
  }
  c.down_stride = j.at("down_stride").get<int>();
  c.skip_connections = j.at("skip_connections").get<bool>();
  c.final_activation =
      activation_from_name(j.at("final_activation").get<std::string>());
  return c;
}

json config_to_json(const DiscriminatorConfig& c) {
  return json{{"in_channels", c.in_channels},
              {"widths", c.widths},
              {"kernel", c.kernel},
              {"strides", c.strides},
              {"padding", c.padding}};
}

DiscriminatorConfig discriminator_config_from_json(const json& j) {
  DiscriminatorConfig c;
  c.in_channels = j.at("in_channels").get<int>();
  c.widths = j.at("widths").get<std::vector<int>>();
  c.strides = j.at("strides").get<std::vector<int>>();
  for (int a = 0; a < 3; ++a)
    c.kernel[std::size_t(a)] = j.at("kernel").at(std::size_t(a)).get<int>();
  c.padding = j.at("padding").get<int>();
  return c;
}

json adam_to_json(const AdamState<float>& st) {
  return json{{"lr", st.cfg.lr},
              {"beta1", st.cfg.beta1},
              {"beta2", st.cfg.beta2},
              {"eps", st.cfg.eps},
              {"step", st.step}};
}

AdamState<float> adam_from_json(const json& j) {
  AdamState<float> st;
  st.cfg.lr = j.at("lr").get<double>();
  st.cfg.beta1 = j.at("beta1").get<double>();
  st.cfg.beta2 = j.at("beta2").get<double>();
  st.cfg.eps = j.at("eps").get<double>();
  st.step = j.at("step").get<std::int64_t>();
  return st;
}

struct BlobWriter {
  std::vector<float> payload;
  json manifest = json::array();

  void add(const std::string& name, const std::vector<std::int64_t>& shape,
           const float* data, std::size_t count) {
    manifest.push_back(json{{"name", name},
                            {"shape", shape},
                            {"offset", payload.size()},
                            {"count", count}});
    payload.insert(payload.end(), data, data + count);
  }
};

struct BlobReader {
  const json& manifest;
  const std::vector<float>& payload;
  std::size_t cursor = 0;

  void read(const std::string& name, const std::vector<std::int64_t>& shape,
            float* out, std::size_t count) {
    if (cursor >= manifest.size())
      throw IoError("bad checkpoint: manifest too short");
    const json& e = manifest[cursor++];
    if (e.at("name").get<std::string>() != name)
      throw IoError("bad checkpoint: expected blob '" + name + "'");
    if (e.at("shape").get<std::vector<std::int64_t>>() != shape)
      throw IoError("bad checkpoint: blob '" + name + "' has wrong shape");
    const std::size_t off = e.at("offset").get<std::size_t>();
    const std::size_t cnt = e.at("count").get<std::size_t>();
    if (cnt != count || off + cnt > payload.size())
      throw IoError("bad checkpoint: blob '" + name + "' out of bounds");
    std::memcpy(out, payload.data() + off, cnt * sizeof(float));
  }
};

constexpr char kMagic[8] = {'R', 'V', 'O', 'X', 'C', 'K', 'P', 'T'};

}  // namespace

const char* activation_name(Activation a) {
  switch (a) {
    case Activation::Identity: return "identity";
    case Activation::ReLU: return "relu";
    case Activation::LeakyReLU02: return "leaky_relu_0.2";
    default: return "sigmoid";
  }
}

Activation activation_from_name(const std::string& s) {
  if (s == "identity") return Activation::Identity;
  if (s == "relu") return Activation::ReLU;
  if (s == "leaky_relu_0.2") return Activation::LeakyReLU02;
  if (s == "sigmoid") return Activation::Sigmoid;
  throw DomainError("unknown activation '" + s + "'");
}

std::vector<ConvSpec> generator_layer_specs(const GeneratorConfig& cfg) {
  if (cfg.depth < 1) throw DomainError("generator depth must be >= 1");
  if (cfg.base_channels < 1 || cfg.in_channels < 1 || cfg.out_channels < 1)
    throw DomainError("generator channels must be >= 1");
  if (cfg.down_stride < 1) throw DomainError("down stride must be >= 1");
  const int conv_pad = same_padding(cfg.conv_kernel);
  if (cfg.up_kernel[0] != cfg.up_kernel[1] || cfg.up_kernel[1] != cfg.up_kernel[2])
    throw DomainError("generator kernels must be isotropic");
  if ((cfg.up_kernel[0] - cfg.down_stride) % 2 != 0 ||
      cfg.up_kernel[0] < cfg.down_stride)
    throw DomainError("up kernel and stride must give symmetric padding");
  const int up_pad = (cfg.up_kernel[0] - cfg.down_stride) / 2;
  const int mul = cfg.skip_connections ? 2 : 1;

  std::vector<ConvSpec> specs;
  // stem
  specs.push_back({cfg.in_channels, cfg.base_channels, cfg.conv_kernel, 1,
                   conv_pad, false});
  // encoder
  for (int d = 0; d < cfg.depth; ++d)
    specs.push_back({cfg.base_channels << d, cfg.base_channels << (d + 1),
                     cfg.conv_kernel, cfg.down_stride, conv_pad, false});
  // decoder, stored by level d = 0..depth-1
  for (int d = 0; d < cfg.depth; ++d) {
    const int in_ch = d == cfg.depth - 1
                          ? cfg.base_channels << cfg.depth
                          : (cfg.base_channels << (d + 1)) * mul;
    specs.push_back({in_ch, cfg.base_channels << d, cfg.up_kernel,
                     cfg.down_stride, up_pad, true});
  }
  // head: 1x1x1 projection
  specs.push_back({cfg.base_channels * mul, cfg.out_channels, {1, 1, 1}, 1, 0,
                   false});
  return specs;
}

std::size_t parameter_count(const GeneratorConfig& cfg) {
  std::size_t n = 0;
  for (const auto& s : generator_layer_specs(cfg)) {
    n += std::size_t(s.in_channels) * std::size_t(s.out_channels) *
         std::size_t(s.kernel[0]) * std::size_t(s.kernel[1]) *
         std::size_t(s.kernel[2]);
    n += std::size_t(s.out_channels);
  }
  return n;
}

std::vector<ConvSpec> discriminator_layer_specs(const DiscriminatorConfig& cfg) {
  if (cfg.in_channels < 2 || cfg.in_channels % 2 != 0)
    throw DomainError("discriminator input channels must be even (condition+candidate)");
  if (cfg.strides.size() != cfg.widths.size() + 1 || cfg.strides.empty())
    throw DomainError("discriminator needs strides.size() == widths.size() + 1");
  for (int w : cfg.widths)
    if (w < 1) throw DomainError("discriminator widths must be >= 1");
  const int n = cfg.layer_count();
  std::vector<ConvSpec> specs;
  specs.reserve(std::size_t(n));
  int in = cfg.in_channels;
  for (int i = 0; i < n; ++i) {
    const int out = i == n - 1 ? 1 : cfg.widths[std::size_t(i)];
    specs.push_back({in, out, cfg.kernel, cfg.strides[std::size_t(i)],
                     cfg.padding, false});
    in = out;
  }
  return specs;
}

std::size_t parameter_count(const DiscriminatorConfig& cfg) {
  std::size_t n = 0;
  for (const auto& s : discriminator_layer_specs(cfg)) {
    n += std::size_t(s.in_channels) * std::size_t(s.out_channels) *
         std::size_t(s.kernel[0]) * std::size_t(s.kernel[1]) *
         std::size_t(s.kernel[2]);
    n += std::size_t(s.out_channels);
  }
  return n;
}

Generator<float> replace_head(const Generator<float>& g, int num_classes,
                              std::uint64_t seed) {
  if (num_classes < 1) throw DomainError("bad head: num_classes must be >= 1");
  Generator<float> out = g;  // all non-head parameters copied bit-exact
  out.cfg.out_channels = num_classes;
  out.cfg.final_activation = Activation::Identity;
  out.head.spec.out_channels = num_classes;
  out.head.act = Activation::Identity;
  detail::init_layer(out.head, Rng::split(seed, 0));
  return out;
}

Tensor<float> to_tensor(const Volume& v) {
  Tensor<float> t({1, v.c, v.l, v.h, v.w});
  std::copy(v.data.begin(), v.data.end(), t.data.begin());
  return t;
}

Tensor<float> stack_to_tensor(const std::vector<const Volume*>& batch) {
  if (batch.empty()) throw DomainError("shape error: empty batch");
  const Volume& first = *batch[0];
  Tensor<float> t({std::int64_t(batch.size()), first.c, first.l, first.h,
                   first.w});
  const std::size_t per = first.size();
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Volume& v = *batch[i];
    if (v.dims() != first.dims() || v.c != first.c)
      throw DomainError("shape error: batch volumes disagree");
    std::copy(v.data.begin(), v.data.end(), t.data.begin() + std::ptrdiff_t(i * per));
  }
  return t;
}

Volume to_volume(const Tensor<float>& t, std::int64_t batch_index) {
  if (t.shape.size() != 5) throw DomainError("shape error: expected 5-axis tensor");
  if (batch_index < 0 || batch_index >= t.shape[0])
    throw DomainError("shape error: batch index out of range");
  Volume v(int(t.shape[4]), int(t.shape[3]), int(t.shape[2]), int(t.shape[1]));
  const std::size_t per = v.size();
  std::copy_n(t.data.begin() + std::ptrdiff_t(std::size_t(batch_index) * per),
              per, v.data.begin());
  return v;
}

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  BlobWriter blobs;
  for_each_param(ck.generator,
                 [&](const std::string& n, const Tensor<float>& t) {
                   blobs.add(n, t.shape, t.data.data(), t.data.size());
                 });
  if (ck.discriminator)
    for_each_param(*ck.discriminator,
                   [&](const std::string& n, const Tensor<float>& t) {
                     blobs.add(n, t.shape, t.data.data(), t.data.size());
                   });
  auto add_moments = [&](const char* tag, const AdamState<float>& st) {
    for (std::size_t i = 0; i < st.m.size(); ++i) {
      blobs.add(std::string(tag) + ".m" + std::to_string(i),
                {std::int64_t(st.m[i].size())}, st.m[i].data(), st.m[i].size());
      blobs.add(std::string(tag) + ".v" + std::to_string(i),
                {std::int64_t(st.v[i].size())}, st.v[i].data(), st.v[i].size());
    }
  };
  if (ck.g_opt) add_moments("opt.g", *ck.g_opt);
  if (ck.d_opt) add_moments("opt.d", *ck.d_opt);

  json j;
  j["format_version"] = ck.version;
  j["generator"] = config_to_json(ck.generator.cfg);
  j["discriminator"] =
      ck.discriminator ? config_to_json(ck.discriminator->cfg) : json(nullptr);
  j["optimizer"] = json{{"g", ck.g_opt ? adam_to_json(*ck.g_opt) : json(nullptr)},
                        {"d", ck.d_opt ? adam_to_json(*ck.d_opt) : json(nullptr)}};
  j["rng_state"] = ck.rng_state;
  j["metadata"] = json{{"training_step", ck.meta.training_step},
                       {"loss_digest", ck.meta.loss_digest}};
  j["manifest"] = blobs.manifest;
  const std::string text = j.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("write error: " + path);
  out.write(kMagic, sizeof(kMagic));
  const std::uint32_t ver = ck.version;
  out.write(reinterpret_cast<const char*>(&ver), sizeof(ver));
  const std::uint64_t jlen = text.size();
  out.write(reinterpret_cast<const char*>(&jlen), sizeof(jlen));
  out.write(text.data(), std::streamsize(text.size()));
  out.write(reinterpret_cast<const char*>(blobs.payload.data()),
            std::streamsize(blobs.payload.size() * sizeof(float)));
  if (!out.flush()) throw IoError("write error: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  in.seekg(0, std::ios::end);
  const std::size_t file_size = std::size_t(in.tellg());
  in.seekg(0, std::ios::beg);
  if (file_size < sizeof(kMagic) + sizeof(std::uint32_t) + sizeof(std::uint64_t))
    throw IoError("bad checkpoint: truncated header in " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw IoError("bad checkpoint: wrong magic in " + path);
  std::uint32_t ver = 0;
  in.read(reinterpret_cast<char*>(&ver), sizeof(ver));
  if (ver != kCheckpointVersion)
    throw IoError("incompatible checkpoint: format version " +
                  std::to_string(ver));
  std::uint64_t jlen = 0;
  in.read(reinterpret_cast<char*>(&jlen), sizeof(jlen));
  const std::size_t header = sizeof(kMagic) + sizeof(ver) + sizeof(jlen);
  if (header + jlen > file_size)
    throw IoError("bad checkpoint: truncated metadata in " + path);
  std::string text(jlen, '\0');
  in.read(text.data(), std::streamsize(jlen));

  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw IoError(std::string("bad checkpoint: ") + e.what());
  }

  const std::size_t payload_bytes = file_size - header - jlen;
  if (payload_bytes % sizeof(float) != 0)
    throw IoError("bad checkpoint: payload not float-aligned in " + path);
  std::vector<float> payload(payload_bytes / sizeof(float));
  in.read(reinterpret_cast<char*>(payload.data()),
          std::streamsize(payload_bytes));
  if (!in) throw IoError("bad checkpoint: cannot read payload in " + path);

  try {
    Checkpoint ck;
    ck.version = ver;
    ck.generator = make_generator<float>(generator_config_from_json(j.at("generator")), 0);
    if (!j.at("discriminator").is_null())
      ck.discriminator = make_discriminator<float>(
          discriminator_config_from_json(j.at("discriminator")), 0);
    BlobReader reader{j.at("manifest"), payload};
    for_each_param(ck.generator, [&](const std::string& n, Tensor<float>& t) {
      reader.read(n, t.shape, t.data.data(), t.data.size());
    });
    if (ck.discriminator)
      for_each_param(*ck.discriminator,
                     [&](const std::string& n, Tensor<float>& t) {
                       reader.read(n, t.shape, t.data.data(), t.data.size());
                     });
    auto read_moments = [&](const char* tag, AdamState<float>& st,
                            std::vector<Tensor<float>*> params) {
      st.m.resize(params.size());
      st.v.resize(params.size());
      for (std::size_t i = 0; i < params.size(); ++i) {
        const std::size_t cnt = params[i]->data.size();
        st.m[i].assign(cnt, 0.f);
        st.v[i].assign(cnt, 0.f);
        reader.read(std::string(tag) + ".m" + std::to_string(i),
                    {std::int64_t(cnt)}, st.m[i].data(), cnt);
        reader.read(std::string(tag) + ".v" + std::to_string(i),
                    {std::int64_t(cnt)}, st.v[i].data(), cnt);
      }
    };
    const json& opt = j.at("optimizer");
    if (!opt.at("g").is_null()) {
      AdamState<float> st = adam_from_json(opt.at("g"));
      read_moments("opt.g", st, param_list(ck.generator));
      ck.g_opt = std::move(st);
    }
    if (!opt.at("d").is_null()) {
      if (!ck.discriminator)
        throw IoError("bad checkpoint: optimizer without discriminator");
      AdamState<float> st = adam_from_json(opt.at("d"));
      read_moments("opt.d", st, param_list(*ck.discriminator));
      ck.d_opt = std::move(st);
    }
    ck.rng_state = j.at("rng_state").get<std::uint64_t>();
    ck.meta.training_step = j.at("metadata").at("training_step").get<std::int64_t>();
    ck.meta.loss_digest = j.at("metadata").at("loss_digest").get<std::string>();
    return ck;
  } catch (const json::exception& e) {
    throw IoError(std::string("bad checkpoint: ") + e.what());
  }
}

}  // namespace rvox::net
