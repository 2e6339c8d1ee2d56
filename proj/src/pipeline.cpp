#include "rvox/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "rvox/error.hpp"
#include "rvox/loss.hpp"
#include "rvox/net.hpp"
#include "rvox/rng.hpp"

namespace rvox::pipeline {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// Seed stream tags. Sample streams use the sample index directly; the rest
// start high so adding samples never collides with them.
constexpr std::uint64_t kStreamInitG = 1u << 20;
constexpr std::uint64_t kStreamInitD = (1u << 20) + 1;
constexpr std::uint64_t kStreamBatch = (1u << 20) + 2;
constexpr std::uint64_t kStreamSplit = (1u << 20) + 3;
constexpr std::uint64_t kStreamHead = (1u << 20) + 4;

std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", (unsigned long long)v);
  return buf;
}

// Fixed-width float formatting so reruns are byte-identical.
std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

void check_keys(const json& j, std::initializer_list<const char*> allowed,
                const std::string& where) {
  if (!j.is_object()) throw DomainError("config: " + where + " must be an object");
  for (auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw DomainError("config: unknown key '" + where + key + "'");
  }
}

json synth_to_json(const SyntheticSpec& s) {
  return json{{"count", s.count},          {"dims", s.dims},
              {"channels", s.channels},    {"blob_count", s.blob_count},
              {"blob_radius", s.blob_radius}, {"smoothness", s.smoothness},
              {"noise_sd", s.noise_sd},    {"seed", s.seed}};
}

SyntheticSpec synth_from_json(const json& j) {
  check_keys(j, {"count", "dims", "channels", "blob_count", "blob_radius",
                 "smoothness", "noise_sd", "seed"},
             "data.synth.");
  SyntheticSpec s;
  s.count = j.at("count").get<int>();
  for (int a = 0; a < 3; ++a) s.dims[std::size_t(a)] = j.at("dims").at(std::size_t(a)).get<int>();
  s.channels = j.at("channels").get<int>();
  for (int a = 0; a < 2; ++a) {
    s.blob_count[std::size_t(a)] = j.at("blob_count").at(std::size_t(a)).get<int>();
    s.blob_radius[std::size_t(a)] = j.at("blob_radius").at(std::size_t(a)).get<double>();
  }
  s.smoothness = j.at("smoothness").get<double>();
  s.noise_sd = j.at("noise_sd").get<double>();
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

json config_to_json_obj(const ExperimentConfig& c) {
  return json{
      {"data",
       {{"source", c.data_source},
        {"dir", c.data_dir},
        {"synth", synth_to_json(c.synth)},
        {"crop", c.crop},
        {"normalize", c.normalize}}},
      {"disarrange", {{"side", c.side}, {"m", c.m}}},
      {"objective",
       {{"recon_loss", c.recon_loss},
        {"adversarial", c.adversarial},
        {"adv_mode", c.adv_mode},
        {"lambda", c.lambda}}},
      {"model", {{"depth", c.depth}, {"base_channels", c.base_channels}}},
      {"optim",
       {{"pretrain_lr", c.pretrain_lr},
        {"d_lr_scale", c.d_lr_scale},
        {"finetune_lr", c.finetune_lr},
        {"batch_size", c.batch_size}}},
      {"schedule",
       {{"pretrain_steps", c.pretrain_steps},
        {"finetune_steps", c.finetune_steps}}},
      {"finetune",
       {{"label_fraction", c.label_fraction},
        {"num_classes", c.num_classes},
        {"eval_count", c.eval_count}}},
      {"seed", c.seed},
      {"out_dir", c.out_dir}};
}

ExperimentConfig config_from_json_obj(const json& j) {
  check_keys(j,
             {"data", "disarrange", "objective", "model", "optim", "schedule",
              "finetune", "seed", "out_dir"},
             "");
  ExperimentConfig c;
  const json& d = j.at("data");
  check_keys(d, {"source", "dir", "synth", "crop", "normalize"}, "data.");
  c.data_source = d.at("source").get<std::string>();
  if (c.data_source != "synthetic" && c.data_source != "volumes_dir" &&
      c.data_source != "pairs_dir")
    throw DomainError("config: data.source must be synthetic|volumes_dir|pairs_dir");
  c.data_dir = d.at("dir").get<std::string>();
  c.synth = synth_from_json(d.at("synth"));
  for (int a = 0; a < 3; ++a) c.crop[std::size_t(a)] = d.at("crop").at(std::size_t(a)).get<int>();
  c.normalize = d.at("normalize").get<std::string>();
  normalize_mode_from_string(c.normalize);  // validates

  const json& dis = j.at("disarrange");
  check_keys(dis, {"side", "m"}, "disarrange.");
  for (int a = 0; a < 3; ++a) c.side[std::size_t(a)] = dis.at("side").at(std::size_t(a)).get<int>();
  c.m = dis.at("m").get<int>();

  const json& o = j.at("objective");
  check_keys(o, {"recon_loss", "adversarial", "adv_mode", "lambda"}, "objective.");
  c.recon_loss = o.at("recon_loss").get<std::string>();
  if (c.recon_loss != "l1" && c.recon_loss != "l2")
    throw DomainError("config: objective.recon_loss must be l1|l2");
  c.adversarial = o.at("adversarial").get<bool>();
  c.adv_mode = o.at("adv_mode").get<std::string>();
  loss::adv_mode_from_string(c.adv_mode);  // validates
  c.lambda = o.at("lambda").get<double>();
  if (c.lambda < 0) throw DomainError("config: lambda must be >= 0");

  const json& mo = j.at("model");
  check_keys(mo, {"depth", "base_channels"}, "model.");
  c.depth = mo.at("depth").get<int>();
  c.base_channels = mo.at("base_channels").get<int>();

  const json& op = j.at("optim");
  check_keys(op, {"pretrain_lr", "d_lr_scale", "finetune_lr", "batch_size"},
             "optim.");
  c.pretrain_lr = op.at("pretrain_lr").get<double>();
  c.d_lr_scale = op.at("d_lr_scale").get<double>();
  if (!(c.d_lr_scale > 0.0))
    throw DomainError("config: d_lr_scale must be > 0");
  c.finetune_lr = op.at("finetune_lr").get<double>();
  c.batch_size = op.at("batch_size").get<int>();
  if (c.batch_size < 1) throw DomainError("config: batch_size must be >= 1");

  const json& sc = j.at("schedule");
  check_keys(sc, {"pretrain_steps", "finetune_steps"}, "schedule.");
  c.pretrain_steps = sc.at("pretrain_steps").get<int>();
  c.finetune_steps = sc.at("finetune_steps").get<int>();
  if (c.pretrain_steps < 0 || c.finetune_steps < 0)
    throw DomainError("config: step counts must be >= 0");

  const json& ft = j.at("finetune");
  check_keys(ft, {"label_fraction", "num_classes", "eval_count"}, "finetune.");
  c.label_fraction = ft.at("label_fraction").get<double>();
  if (!(c.label_fraction > 0.0 && c.label_fraction <= 1.0))
    throw DomainError("config: label_fraction must be in (0, 1]");
  c.num_classes = ft.at("num_classes").get<int>();
  if (c.num_classes < 2) throw DomainError("config: num_classes must be >= 2");
  c.eval_count = ft.at("eval_count").get<int>();

  c.seed = j.at("seed").get<std::uint64_t>();
  c.out_dir = j.at("out_dir").get<std::string>();
  return c;
}

void write_text(const std::string& path, const std::string& text) {
  fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("write error: " + path);
  out << text;
  if (!out.flush()) throw IoError("write error: " + path);
}

struct Batcher {
  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  Rng rng;

  Batcher(std::size_t n, std::uint64_t seed) : rng(seed) {
    order.resize(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(order);
  }

  std::size_t next() {
    if (cursor >= order.size()) {
      rng.shuffle(order);
      cursor = 0;
    }
    return order[cursor++];
  }
};

std::vector<Volume> load_source_volumes(const ExperimentConfig& cfg) {
  if (cfg.data_source == "synthetic") return synth_volumes(cfg.synth);
  if (cfg.data_source != "volumes_dir")
    throw DomainError("config: source '" + cfg.data_source +
                      "' is not a volume source");
  if (!fs::is_directory(cfg.data_dir))
    throw IoError("ingest error: " + cfg.data_dir + " is not a directory");
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(cfg.data_dir)) {
    if (!e.is_regular_file()) continue;
    const std::string name = e.path().filename().string();
    if (e.path().extension() == ".nii")
      names.push_back(e.path().string());
    else if (e.path().extension() == ".json" && !name.ends_with(".hdr.json") &&
             !name.ends_with(".record.json"))
      names.push_back(e.path().string());
  }
  std::sort(names.begin(), names.end());
  if (names.empty())
    throw IoError("ingest error: no volumes found in " + cfg.data_dir);
  std::vector<Volume> out;
  out.reserve(names.size());
  for (const auto& n : names) out.push_back(load_volume(n));
  return out;
}

std::string pair_id(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%06zu", i);
  return buf;
}

net::GeneratorConfig generator_config_for(const ExperimentConfig& cfg,
                                          int channels, int out_channels) {
  net::GeneratorConfig g;
  g.in_channels = channels;
  g.out_channels = out_channels;
  g.depth = cfg.depth;
  g.base_channels = cfg.base_channels;
  return g;
}

double checked_wall_clock(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

std::string losses_csv_text(const MetricsReport& rep) {
  std::string text;
  if (!rep.ce_rows.empty()) {
    text = "step,ce\n";
    for (const auto& r : rep.ce_rows)
      text += std::to_string(r.step) + "," + fmt(r.ce) + "\n";
  } else {
    text = "step,l1,l2,adv_d,adv_g,joint\n";
    for (const auto& r : rep.rows)
      text += std::to_string(r.step) + "," + fmt(r.l1) + "," + fmt(r.l2) + "," +
              fmt(r.adv_d) + "," + fmt(r.adv_g) + "," + fmt(r.joint) + "\n";
  }
  return text;
}

}  // namespace

std::string config_to_json(const ExperimentConfig& cfg) {
  return config_to_json_obj(cfg).dump(2) + "\n";
}

ExperimentConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw DomainError(std::string("config: ") + e.what());
  }
  try {
    return config_from_json_obj(j);
  } catch (const json::exception& e) {
    throw DomainError(std::string("config: ") + e.what());
  }
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  return config_from_json(text);
}

void apply_override(ExperimentConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw DomainError("override must be key.path=value: '" + assignment + "'");
  const std::string path = assignment.substr(0, eq);
  const std::string value = assignment.substr(eq + 1);

  json j = config_to_json_obj(cfg);
  json* cur = &j;
  std::size_t pos = 0;
  while (true) {
    const std::size_t dot = path.find('.', pos);
    const std::string key = path.substr(pos, dot - pos);
    if (!cur->is_object() || !cur->contains(key))
      throw DomainError("unknown key '" + path + "'");
    cur = &(*cur)[key];
    if (dot == std::string::npos) break;
    pos = dot + 1;
  }

  auto parse_scalar = [&](const json& like, const std::string& text) -> json {
    try {
      if (like.is_boolean()) {
        if (text == "true") return true;
        if (text == "false") return false;
        throw DomainError("expected true/false");
      }
      if (like.is_number_unsigned()) return json(std::stoull(text));
      if (like.is_number_integer()) return json(std::stoll(text));
      if (like.is_number_float()) return json(std::stod(text));
      if (like.is_string()) return json(text);
    } catch (const std::exception&) {
      throw DomainError("override value '" + text + "' has wrong type for '" +
                        path + "'");
    }
    throw DomainError("key '" + path + "' cannot be overridden");
  };

  if (cur->is_array()) {
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (true) {
      const std::size_t comma = value.find(',', start);
      parts.push_back(value.substr(start, comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (parts.size() != cur->size())
      throw DomainError("override for '" + path + "' needs " +
                        std::to_string(cur->size()) + " comma-separated values");
    for (std::size_t i = 0; i < parts.size(); ++i)
      (*cur)[i] = parse_scalar((*cur)[i], parts[i]);
  } else {
    *cur = parse_scalar(*cur, value);
  }
  cfg = config_from_json_obj(j);
}

std::string config_digest(const ExperimentConfig& cfg) {
  return hex64(fnv1a64(config_to_json_obj(cfg).dump()));
}

LabeledVolumes synth_labeled_volumes(const SyntheticSpec& spec, int num_classes) {
  if (spec.count < 1) throw DomainError("bad spec: count must be >= 1");
  if (spec.channels < 1) throw DomainError("bad spec: channels must be >= 1");
  if (num_classes < 2) throw DomainError("bad spec: num_classes must be >= 2");
  if (spec.blob_count[0] < 0 || spec.blob_count[1] < spec.blob_count[0])
    throw DomainError("bad spec: blob_count range");
  if (spec.blob_radius[0] <= 0 || spec.blob_radius[1] < spec.blob_radius[0])
    throw DomainError("bad spec: blob_radius range");
  for (int a = 0; a < 3; ++a) {
    if (spec.dims[std::size_t(a)] < 2) throw DomainError("bad spec: dims too small");
    if (2.0 * spec.blob_radius[1] > double(spec.dims[std::size_t(a)]))
      throw DomainError("bad spec: blob radius does not fit inside dims");
  }

  const int bands = num_classes - 1;
  LabeledVolumes out;
  out.volumes.reserve(std::size_t(spec.count));
  out.labels.reserve(std::size_t(spec.count));

  for (int vi = 0; vi < spec.count; ++vi) {
    Rng rng(Rng::split(spec.seed, std::uint64_t(vi)));
    Volume v(spec.dims[0], spec.dims[1], spec.dims[2], spec.channels, 0.f);
    std::vector<std::int32_t> lab(v.voxels_per_channel(), 0);

    const int nblobs =
        spec.blob_count[0] +
        int(rng.uniform_int(std::uint64_t(spec.blob_count[1] - spec.blob_count[0]) + 1));
    for (int b = 0; b < nblobs; ++b) {
      double cx = rng.uniform(0.15 * spec.dims[0], 0.85 * spec.dims[0]);
      double cy = rng.uniform(0.15 * spec.dims[1], 0.85 * spec.dims[1]);
      double cz = rng.uniform(0.15 * spec.dims[2], 0.85 * spec.dims[2]);
      const double radius = rng.uniform(spec.blob_radius[0], spec.blob_radius[1]);
      // radius band doubles as the segmentation class and sets intensity,
      // so classes are recoverable from appearance
      int band = int(double(bands) * (radius - spec.blob_radius[0]) /
                     (spec.blob_radius[1] - spec.blob_radius[0] + 1e-12));
      band = std::clamp(band, 0, bands - 1);
      const double amp = 0.5 + (bands > 1 ? 0.4 * double(band) / double(bands - 1) : 0.3) +
                         0.1 * rng.uniform();
      const double sigma = std::max(0.5, spec.smoothness * radius);
      const double reach = std::max(radius, 3.0 * sigma);
      const int x0 = std::max(0, int(std::floor(cx - reach)));
      const int x1 = std::min(spec.dims[0] - 1, int(std::ceil(cx + reach)));
      const int y0 = std::max(0, int(std::floor(cy - reach)));
      const int y1 = std::min(spec.dims[1] - 1, int(std::ceil(cy + reach)));
      const int z0 = std::max(0, int(std::floor(cz - reach)));
      const int z1 = std::min(spec.dims[2] - 1, int(std::ceil(cz + reach)));
      for (int z = z0; z <= z1; ++z)
        for (int y = y0; y <= y1; ++y)
          for (int x = x0; x <= x1; ++x) {
            const double dx = x - cx, dy = y - cy, dz = z - cz;
            const double d2 = dx * dx + dy * dy + dz * dz;
            const float add = float(amp * std::exp(-d2 / (2.0 * sigma * sigma)));
            v.at(x, y, z, 0) += add;
            if (d2 <= radius * radius)
              lab[v.index(x, y, z, 0)] = std::int32_t(band + 1);
          }
    }
    // secondary channels are scaled copies of channel 0 (same anatomy,
    // different contrast), each with its own noise below
    for (int chan = 1; chan < spec.channels; ++chan) {
      const float scale = 1.f + 0.1f * float(chan);
      const std::size_t per = v.voxels_per_channel();
      for (std::size_t i = 0; i < per; ++i)
        v.data[std::size_t(chan) * per + i] = v.data[i] * scale;
    }
    if (spec.noise_sd > 0)
      for (auto& x : v.data) x += float(spec.noise_sd * rng.normal());
    out.volumes.push_back(std::move(v));
    out.labels.push_back(std::move(lab));
  }
  return out;
}

std::vector<Volume> synth_volumes(const SyntheticSpec& spec) {
  return synth_labeled_volumes(spec, 3).volumes;
}

std::vector<PretextPair> make_pretext_pairs(const ExperimentConfig& cfg) {
  std::vector<Volume> sources = load_source_volumes(cfg);
  const NormalizeMode mode = normalize_mode_from_string(cfg.normalize);
  std::vector<PretextPair> pairs;
  pairs.reserve(sources.size());
  for (std::size_t i = 0; i < sources.size(); ++i) {
    const std::uint64_t sample_seed = Rng::split(cfg.seed, i);
    auto [cropped, origin] =
        random_crop(sources[i], cfg.crop, Rng::split(sample_seed, 0));
    (void)origin;
    Volume y = normalize(cropped, mode);
    rubik::DisarrangeParams params;
    params.side = cfg.side;
    params.layers_per_axis = cfg.m;
    params.seed = Rng::split(sample_seed, 1);
    auto [x, record] = rubik::disarrange(y, params);
    pairs.push_back({pair_id(i), std::move(x), std::move(y), std::move(record)});
  }
  return pairs;
}

int gen_pretext_dataset(const ExperimentConfig& cfg, const std::string& out_dir) {
  const auto pairs = make_pretext_pairs(cfg);
  const fs::path dir = fs::path(out_dir) / "pairs";
  fs::create_directories(dir);
  for (const auto& p : pairs) {
    const std::string stem = (dir / p.id).string();
    save_raw(p.x, stem + ".hdr.json", stem + ".x.f32");
    save_raw_payload(p.y, stem + ".y.f32");
    rubik::save_record(p.record, stem + ".json");
  }
  return int(pairs.size());
}

std::vector<PretextPair> load_pretext_pairs(const std::string& pairs_dir) {
  fs::path dir(pairs_dir);
  if (fs::is_directory(dir / "pairs")) dir /= "pairs";
  if (!fs::is_directory(dir))
    throw IoError("ingest error: " + pairs_dir + " is not a directory");
  std::vector<std::string> ids;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    if (name.ends_with(".hdr.json"))
      ids.push_back(name.substr(0, name.size() - 9));
  }
  std::sort(ids.begin(), ids.end());
  if (ids.empty()) throw IoError("ingest error: no pairs in " + pairs_dir);
  std::vector<PretextPair> pairs;
  pairs.reserve(ids.size());
  for (const auto& id : ids) {
    const std::string stem = (dir / id).string();
    PretextPair p;
    p.id = id;
    p.x = load_raw(stem + ".hdr.json", stem + ".x.f32");
    p.y = load_raw(stem + ".hdr.json", stem + ".y.f32");
    p.record = rubik::load_record(stem + ".json");
    pairs.push_back(std::move(p));
  }
  return pairs;
}

PretrainResult pretrain(const ExperimentConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto pairs = cfg.data_source == "pairs_dir"
                         ? load_pretext_pairs(cfg.data_dir)
                         : make_pretext_pairs(cfg);
  if (pairs.empty()) throw DomainError("ingest error: no pretext pairs");
  const int C = pairs[0].y.c;

  auto G = net::make_generator<float>(generator_config_for(cfg, C, C),
                                      Rng::split(cfg.seed, kStreamInitG));
  net::DiscriminatorConfig dcfg;
  dcfg.in_channels = 2 * C;
  auto D = net::make_discriminator<float>(dcfg, Rng::split(cfg.seed, kStreamInitD));

  net::AdamState<float> g_opt, d_opt;
  g_opt.cfg.lr = cfg.pretrain_lr;
  d_opt.cfg.lr = cfg.pretrain_lr * cfg.d_lr_scale;  // slower D keeps the
                                                    // desk-scale game balanced

  net::TrainStepOptions opts;
  opts.weights.lambda = cfg.lambda;
  opts.adv_mode = loss::adv_mode_from_string(cfg.adv_mode);
  opts.use_l2 = cfg.recon_loss == "l2";
  opts.adversarial = cfg.adversarial;

  MetricsReport rep;
  rep.seed = cfg.seed;
  rep.config_digest = config_digest(cfg);

  Batcher batcher(pairs.size(), Rng::split(cfg.seed, kStreamBatch));
  const int B = cfg.batch_size;
  std::vector<const Volume*> bx(static_cast<std::size_t>(B)), by(static_cast<std::size_t>(B));
  for (int step = 1; step <= cfg.pretrain_steps; ++step) {
    for (int b = 0; b < B; ++b) {
      const std::size_t i = batcher.next();
      bx[std::size_t(b)] = &pairs[i].x;
      by[std::size_t(b)] = &pairs[i].y;
    }
    const auto x = net::stack_to_tensor(bx);
    const auto y = net::stack_to_tensor(by);
    const auto row = net::gan_train_step(x, y, G, D, g_opt, d_opt, opts);
    const bool finite = std::isfinite(row.l1) && std::isfinite(row.l2) &&
                        std::isfinite(row.adv_d) && std::isfinite(row.adv_g) &&
                        std::isfinite(row.joint);
    if (!finite) {
      rep.status = "diverged";
      rep.wall_clock_s = checked_wall_clock(t0);
      write_losses_csv(rep, cfg.out_dir + "/losses.csv");
      write_report_json(rep, cfg.out_dir + "/report.json");
      write_run_manifest(cfg, rep.wall_clock_s, cfg.out_dir + "/run_manifest.json");
      throw DomainError("diverged: non-finite loss at step " +
                        std::to_string(step));
    }
    rep.rows.push_back(LossRow{step, row.l1, row.l2, row.adv_d, row.adv_g, row.joint});
  }

  // final reconstruction error over the full dataset
  double mse_sum = 0;
  for (const auto& p : pairs) {
    const auto gx = net::generator_forward(G, net::to_tensor(p.x));
    mse_sum += loss::l2_loss(p.y, net::to_volume(gx));
  }
  rep.final_recon_mse = mse_sum / double(pairs.size());

  net::Checkpoint ck;
  ck.generator = std::move(G);
  if (cfg.adversarial) ck.discriminator = std::move(D);
  ck.g_opt = std::move(g_opt);
  if (cfg.adversarial) ck.d_opt = std::move(d_opt);
  ck.rng_state = cfg.seed;
  ck.meta.training_step = cfg.pretrain_steps;
  ck.meta.loss_digest = hex64(fnv1a64(losses_csv_text(rep)));

  fs::create_directories(cfg.out_dir);
  const std::string ck_path = cfg.out_dir + "/checkpoint.rvck";
  net::save_checkpoint(ck, ck_path);

  rep.wall_clock_s = checked_wall_clock(t0);
  write_losses_csv(rep, cfg.out_dir + "/losses.csv");
  write_report_json(rep, cfg.out_dir + "/report.json");
  write_run_manifest(cfg, rep.wall_clock_s, cfg.out_dir + "/run_manifest.json");
  return {ck_path, std::move(rep)};
}

MetricsReport finetune(const ExperimentConfig& cfg,
                       const std::string& checkpoint_path) {
  const auto t0 = std::chrono::steady_clock::now();
  if (cfg.data_source != "synthetic")
    throw DomainError("config: finetune requires the synthetic source");
  auto data = synth_labeled_volumes(cfg.synth, cfg.num_classes);
  const NormalizeMode mode = normalize_mode_from_string(cfg.normalize);
  for (auto& v : data.volumes) v = normalize(v, mode);
  const int N = int(data.volumes.size());
  const int C = data.volumes[0].c;

  const int E = cfg.eval_count > 0 ? cfg.eval_count : std::max(1, N / 4);
  if (E >= N) throw DomainError("config: eval_count leaves no training volumes");

  std::vector<std::size_t> order(static_cast<std::size_t>(N));
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng split_rng(Rng::split(cfg.seed, kStreamSplit));
  split_rng.shuffle(order);
  const int pool = N - E;
  const int n_train =
      std::max(1, int(std::ceil(cfg.label_fraction * double(pool))));
  std::vector<std::size_t> train(order.begin(), order.begin() + n_train);
  std::vector<std::size_t> eval(order.begin() + pool, order.end());

  net::Generator<float> G = [&] {
    if (checkpoint_path.empty())
      return net::make_generator<float>(
          generator_config_for(cfg, C, cfg.num_classes),
          Rng::split(cfg.seed, kStreamInitG));
    net::Checkpoint ck = net::load_checkpoint(checkpoint_path);
    const auto& gc = ck.generator.cfg;
    if (gc.in_channels != C || gc.depth != cfg.depth ||
        gc.base_channels != cfg.base_channels)
      throw DomainError("config mismatch: checkpoint generator is " +
                        std::to_string(gc.in_channels) + "ch depth " +
                        std::to_string(gc.depth));
    return net::replace_head(ck.generator, cfg.num_classes,
                             Rng::split(cfg.seed, kStreamHead));
  }();

  net::AdamState<float> opt;
  opt.cfg.lr = cfg.finetune_lr;

  MetricsReport rep;
  rep.seed = cfg.seed;
  rep.config_digest = config_digest(cfg);

  Batcher batcher(train.size(), Rng::split(cfg.seed, kStreamBatch));
  const int B = cfg.batch_size;
  const std::size_t voxels = data.volumes[0].voxels_per_channel();
  std::vector<const Volume*> bx(static_cast<std::size_t>(B));
  std::vector<std::int32_t> blab(std::size_t(B) * voxels);
  for (int step = 1; step <= cfg.finetune_steps; ++step) {
    for (int b = 0; b < B; ++b) {
      const std::size_t i = train[batcher.next()];
      bx[std::size_t(b)] = &data.volumes[i];
      std::copy(data.labels[i].begin(), data.labels[i].end(),
                blab.begin() + std::ptrdiff_t(std::size_t(b) * voxels));
    }
    const auto x = net::stack_to_tensor(bx);
    const double ce = net::seg_train_step(x, std::span<const std::int32_t>(blab), G, opt);
    if (!std::isfinite(ce)) {
      rep.status = "diverged";
      rep.wall_clock_s = checked_wall_clock(t0);
      write_losses_csv(rep, cfg.out_dir + "/losses.csv");
      write_report_json(rep, cfg.out_dir + "/report.json");
      write_run_manifest(cfg, rep.wall_clock_s, cfg.out_dir + "/run_manifest.json");
      throw DomainError("diverged: non-finite loss at step " +
                        std::to_string(step));
    }
    rep.ce_rows.push_back(CeRow{step, ce});
  }

  // pooled dice over the held-out volumes
  std::vector<std::int32_t> pred_all, gt_all;
  pred_all.reserve(eval.size() * voxels);
  gt_all.reserve(eval.size() * voxels);
  for (const std::size_t i : eval) {
    const auto logits =
        net::generator_forward(G, net::to_tensor(data.volumes[i]));
    const auto pred = net::argmax_labels(logits);
    pred_all.insert(pred_all.end(), pred.begin(), pred.end());
    gt_all.insert(gt_all.end(), data.labels[i].begin(), data.labels[i].end());
  }
  rep.per_class_dice = loss::per_class_dice(pred_all, gt_all, cfg.num_classes);
  rep.mean_dice = loss::mean_dice(pred_all, gt_all, cfg.num_classes);

  rep.wall_clock_s = checked_wall_clock(t0);
  write_losses_csv(rep, cfg.out_dir + "/losses.csv");
  write_report_json(rep, cfg.out_dir + "/report.json");
  write_run_manifest(cfg, rep.wall_clock_s, cfg.out_dir + "/run_manifest.json");
  return rep;
}

std::vector<SweepRow> difficulty_sweep(const ExperimentConfig& cfg,
                                       const std::vector<int>& n_values,
                                       const std::vector<int>& m_values) {
  if (n_values.empty() || m_values.empty())
    throw DomainError("config: sweep lists must be non-empty");
  std::vector<SweepRow> rows;
  for (const int n : n_values)
    for (const int m : m_values) {
      ExperimentConfig sub = cfg;
      sub.side = {n, n, n};
      sub.m = m;
      sub.out_dir = cfg.out_dir + "/cell_n" + std::to_string(n) + "_m" +
                    std::to_string(m);
      const auto pre = pretrain(sub);
      ExperimentConfig ft = sub;
      ft.out_dir = sub.out_dir + "/finetune";
      const auto ftr = finetune(ft, pre.checkpoint_path);
      rows.push_back({n, m, cfg.seed, pre.report.final_recon_mse, ftr.mean_dice});
    }
  write_sweep_csv(rows, cfg.out_dir + "/sweep.csv");
  return rows;
}

EvalResult evaluate_restoration_with(
    const std::function<Volume(const Volume&)>& restorer,
    const std::vector<PretextPair>& pairs) {
  if (pairs.empty()) throw DomainError("ingest error: no pairs to evaluate");
  EvalResult out;
  double sum = 0;
  for (const auto& p : pairs) {
    const double mse = loss::l2_loss(p.y, restorer(p.x));
    out.per_sample.emplace_back(p.id, mse);
    sum += mse;
  }
  out.mse = sum / double(pairs.size());
  return out;
}

EvalResult evaluate_restoration(const std::string& checkpoint_path,
                                const std::string& pairs_dir,
                                const std::string& csv_path) {
  const auto pairs = load_pretext_pairs(pairs_dir);
  const net::Checkpoint ck = net::load_checkpoint(checkpoint_path);
  auto restorer = [&ck](const Volume& x) {
    return net::to_volume(net::generator_forward(ck.generator, net::to_tensor(x)));
  };
  EvalResult res = evaluate_restoration_with(restorer, pairs);
  std::string text = "id,mse\n";
  for (const auto& [id, mse] : res.per_sample) text += id + "," + fmt(mse) + "\n";
  text += "mean," + fmt(res.mse) + "\n";
  write_text(csv_path, text);
  return res;
}

std::string compare_runs(std::span<const double> dice_a,
                         std::span<const double> dice_b) {
  if (dice_a.size() != dice_b.size())
    throw DomainError("shape error: runs have different lengths");
  double mean_a = 0, mean_b = 0;
  for (double v : dice_a) mean_a += v;
  for (double v : dice_b) mean_b += v;
  mean_a /= double(dice_a.size());
  mean_b /= double(dice_b.size());

  json j{{"count", dice_a.size()},
         {"mean_a", mean_a},
         {"mean_b", mean_b},
         {"delta", mean_a - mean_b}};
  try {
    const auto r = loss::paired_t_test_full(dice_a, dice_b);
    j["t"] = r.t;
    j["df"] = r.df;
    j["p"] = r.p;
    j["significant"] = r.p < 0.05;
  } catch (const DomainError&) {
    j["significant"] = false;
    j["note"] = "not significant (zero variance)";
  }
  return j.dump(2) + "\n";
}

void write_losses_csv(const MetricsReport& rep, const std::string& path) {
  write_text(path, losses_csv_text(rep));
}

void write_report_json(const MetricsReport& rep, const std::string& path) {
  json j;
  j["status"] = rep.status;
  j["steps"] = rep.ce_rows.empty() ? rep.rows.size() : rep.ce_rows.size();
  j["final_recon_mse"] =
      std::isnan(rep.final_recon_mse) ? json(nullptr) : json(rep.final_recon_mse);
  j["per_class_dice"] = rep.per_class_dice;
  j["mean_dice"] = std::isnan(rep.mean_dice) ? json(nullptr) : json(rep.mean_dice);
  j["config_digest"] = rep.config_digest;
  j["seed"] = rep.seed;
  j["wall_clock_s"] = rep.wall_clock_s;
  write_text(path, j.dump(2) + "\n");
}

void write_run_manifest(const ExperimentConfig& cfg, double wall_clock_s,
                        const std::string& path) {
  json j;
  j["config"] = config_to_json_obj(cfg);
  j["config_digest"] = config_digest(cfg);
  j["seed"] = cfg.seed;
  j["version"] = "rvox 0.1.0";
  j["wall_clock_s"] = wall_clock_s;
  write_text(path, j.dump(2) + "\n");
}

void write_sweep_csv(const std::vector<SweepRow>& rows, const std::string& path) {
  std::string text = "n,m,seed,final_mse,mean_dice\n";
  for (const auto& r : rows)
    text += std::to_string(r.n) + "," + std::to_string(r.m) + "," +
            std::to_string(r.seed) + "," + fmt(r.final_mse) + "," +
            fmt(r.mean_dice) + "\n";
  write_text(path, text);
}

}  // namespace rvox::pipeline
