#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "rvox/error.hpp"
#include "rvox/loss.hpp"
#include "rvox/net.hpp"
#include "rvox/pipeline.hpp"
#include "rvox/rubik.hpp"
#include "rvox/volume.hpp"

namespace {

namespace fs = std::filesystem;

std::array<int, 3> parse_triple(const std::string& s) {
  std::array<int, 3> out{};
  int n = 0;
  std::size_t pos = 0;
  while (n < 3) {
    const std::size_t comma = s.find(',', pos);
    const std::string part = s.substr(pos, comma - pos);
    try {
      out[std::size_t(n)] = std::stoi(part);
    } catch (const std::exception&) {
      throw rvox::DomainError("expected three comma-separated ints, got '" + s + "'");
    }
    ++n;
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  if (n != 3)
    throw rvox::DomainError("expected three comma-separated ints, got '" + s + "'");
  return out;
}

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::size_t pos = 0;
  while (true) {
    const std::size_t comma = s.find(',', pos);
    const std::string part = s.substr(pos, comma - pos);
    try {
      out.push_back(std::stoi(part));
    } catch (const std::exception&) {
      throw rvox::DomainError("expected comma-separated ints, got '" + s + "'");
    }
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

// malformed flags and --set expressions are usage errors (exit 2)
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::int64_t seed = -1;
  std::string out_dir;
};

void add_config_options(CLI::App* cmd, ConfigArgs& args) {
  cmd->add_option("--config", args.config_path, "Experiment config JSON file");
  cmd->add_option("--set", args.overrides,
                  "Override a config key, e.g. --set objective.lambda=5");
  cmd->add_option("--seed", args.seed, "Override the experiment seed");
  cmd->add_option("--out", args.out_dir, "Override the output directory");
}

void apply_override_or_usage(rvox::pipeline::ExperimentConfig& cfg,
                             const std::string& assignment) {
  try {
    rvox::pipeline::apply_override(cfg, assignment);
  } catch (const rvox::DomainError& e) {
    throw UsageError(e.what());
  }
}

rvox::pipeline::ExperimentConfig resolve_config(const ConfigArgs& args) {
  rvox::pipeline::ExperimentConfig cfg;
  if (!args.config_path.empty()) cfg = rvox::pipeline::load_config(args.config_path);
  for (const auto& ov : args.overrides) apply_override_or_usage(cfg, ov);
  if (args.seed >= 0) cfg.seed = std::uint64_t(args.seed);
  if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
  return cfg;
}

void save_volume_pair(const rvox::Volume& v, const std::string& stem) {
  rvox::save_raw(v, stem + ".json", stem + ".f32");
}

int run(int argc, char** argv) {
  CLI::App app{"rvox: cube-layer rotation pretext engine for 3D volumes"};
  app.require_subcommand(1);

  // --- disarrange ---------------------------------------------------------
  auto* cmd_dis = app.add_subcommand(
      "disarrange", "Disarrange a volume by seeded cube-layer rotations");
  std::string dis_in, dis_out, dis_side = "7,7,7";
  int dis_m = 4;
  std::uint64_t dis_seed = 0;
  cmd_dis->add_option("--in", dis_in, "Input volume (.json header or .nii)")->required();
  cmd_dis->add_option("--out", dis_out, "Output stem (writes <out>.json/.f32/.record.json)")->required();
  cmd_dis->add_option("--side", dis_side, "Subcube side per axis, e.g. 7,7,7");
  cmd_dis->add_option("--m", dis_m, "Rotated layers per axis");
  cmd_dis->add_option("--seed", dis_seed, "Transformation seed");
  cmd_dis->callback([&] {
    const rvox::Volume v = rvox::load_volume(dis_in);
    rvox::rubik::DisarrangeParams params;
    params.side = parse_triple(dis_side);
    params.layers_per_axis = dis_m;
    params.seed = dis_seed;
    auto [x, record] = rvox::rubik::disarrange(v, params);
    save_volume_pair(x, dis_out);
    rvox::rubik::save_record(record, dis_out + ".record.json");
    const auto& g = record.grid;
    std::cerr << "grid " << g.counts[0] << "x" << g.counts[1] << "x"
              << g.counts[2] << " covered " << g.covered[0] << "x"
              << g.covered[1] << "x" << g.covered[2] << " rotations "
              << record.sequence.size() << "\n";
    std::cout << dis_out << ".json " << dis_out << ".record.json\n";
  });

  // --- restore -------------------------------------------------------------
  auto* cmd_res = app.add_subcommand(
      "restore", "Restore a disarranged volume from its record");
  std::string res_in, res_record, res_out, res_reference;
  cmd_res->add_option("--in", res_in, "Disarranged volume (.json header)")->required();
  cmd_res->add_option("--record", res_record, "Record JSON written by disarrange")->required();
  cmd_res->add_option("--out", res_out, "Output stem")->required();
  cmd_res->add_option("--reference", res_reference,
                      "Original volume; prints restoration MSE against it");
  cmd_res->callback([&] {
    const rvox::Volume x = rvox::load_volume(res_in);
    const auto record = rvox::rubik::load_record(res_record);
    const rvox::Volume restored = rvox::rubik::restore(x, record);
    save_volume_pair(restored, res_out);
    if (!res_reference.empty()) {
      const rvox::Volume ref = rvox::load_volume(res_reference);
      std::cout << "mse " << rvox::loss::l2_loss(ref, restored) << "\n";
    }
    std::cout << res_out << ".json\n";
  });

  // --- inspect -------------------------------------------------------------
  auto* cmd_ins = app.add_subcommand("inspect", "Summarize a volume or record");
  std::string ins_in, ins_side;
  cmd_ins->add_option("--in", ins_in, "Volume (.json/.nii) or record JSON")->required();
  cmd_ins->add_option("--side", ins_side,
                      "Subcube side; prints the valid-angle table per axis");
  cmd_ins->callback([&] {
    // records are JSON objects with a "sequence" key; volumes have headers
    bool is_record = false;
    if (fs::path(ins_in).extension() == ".json") {
      std::ifstream in(ins_in, std::ios::binary);
      if (!in) throw rvox::IoError("cannot open " + ins_in);
      std::string text((std::istreambuf_iterator<char>(in)),
                       std::istreambuf_iterator<char>());
      const auto j = nlohmann::json::parse(text, nullptr, false);
      is_record = j.is_object() && j.contains("sequence");
      if (is_record) {
        const auto rec = rvox::rubik::record_from_json(text);
        std::cout << "record: seed " << rec.params.seed << " side "
                  << rec.params.side[0] << "," << rec.params.side[1] << ","
                  << rec.params.side[2] << " m " << rec.params.layers_per_axis
                  << " rotations " << rec.sequence.size() << "\n";
        for (const auto& rot : rec.sequence)
          std::cout << "  " << rvox::rubik::axis_name(rot.axis) << " layer "
                    << rot.layer << " angle " << rot.angle << "\n";
      }
    }
    if (!is_record) {
      const rvox::Volume v = rvox::load_volume(ins_in);
      float lo = v.data.empty() ? 0.f : v.data[0], hi = lo;
      for (float x : v.data) {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
      }
      std::cout << "dims " << v.w << "x" << v.h << "x" << v.l << " channels "
                << v.c << " range [" << lo << "," << hi << "]\n";
      if (!ins_side.empty()) {
        const auto grid = rvox::rubik::make_grid(v.dims(), parse_triple(ins_side));
        std::cout << "grid " << grid.counts[0] << "x" << grid.counts[1] << "x"
                  << grid.counts[2] << "\n";
        for (int a = 0; a < 3; ++a) {
          const auto axis = rvox::rubik::Axis(a);
          std::cout << rvox::rubik::axis_name(axis) << ":";
          for (int angle : rvox::rubik::valid_angles(grid, axis))
            std::cout << " " << angle;
          std::cout << "\n";
        }
      }
    }
  });

  // --- gen-dataset ----------------------------------------------------------
  auto* cmd_gen = app.add_subcommand("gen-dataset", "Materialize a pretext dataset");
  ConfigArgs gen_args;
  add_config_options(cmd_gen, gen_args);
  cmd_gen->callback([&] {
    const auto cfg = resolve_config(gen_args);
    const int n = rvox::pipeline::gen_pretext_dataset(cfg, cfg.out_dir);
    std::cerr << "wrote " << n << " pairs\n";
    std::cout << cfg.out_dir << "/pairs\n";
  });

  // --- pretrain --------------------------------------------------------------
  auto* cmd_pre = app.add_subcommand("pretrain", "Train the restoration model");
  ConfigArgs pre_args;
  std::string pre_loss;
  add_config_options(cmd_pre, pre_args);
  cmd_pre->add_option("--loss", pre_loss, "Reconstruction arm: l1 or l2");
  cmd_pre->callback([&] {
    auto cfg = resolve_config(pre_args);
    if (!pre_loss.empty())
      apply_override_or_usage(cfg, "objective.recon_loss=" + pre_loss);
    const auto res = rvox::pipeline::pretrain(cfg);
    std::cerr << "final recon mse " << res.report.final_recon_mse << "\n";
    std::cout << cfg.out_dir << "/report.json " << res.checkpoint_path << "\n";
  });

  // --- finetune ---------------------------------------------------------------
  auto* cmd_fin = app.add_subcommand(
      "finetune", "Fine-tune on the synthetic segmentation task");
  ConfigArgs fin_args;
  std::string fin_from = "none";
  add_config_options(cmd_fin, fin_args);
  cmd_fin->add_option("--from", fin_from, "Checkpoint path, or 'none' for scratch");
  cmd_fin->callback([&] {
    const auto cfg = resolve_config(fin_args);
    const std::string ckpt = fin_from == "none" ? "" : fin_from;
    const auto rep = rvox::pipeline::finetune(cfg, ckpt);
    std::cerr << "mean dice " << rep.mean_dice << "\n";
    std::cout << cfg.out_dir << "/report.json\n";
  });

  // --- sweep -------------------------------------------------------------------
  auto* cmd_swp = app.add_subcommand(
      "sweep", "Pretrain+finetune over a grid of (n, m) difficulty settings");
  ConfigArgs swp_args;
  std::string swp_n = "2,4,8", swp_m = "2";
  add_config_options(cmd_swp, swp_args);
  cmd_swp->add_option("--n", swp_n, "Subcube sides to sweep, e.g. 2,4,8");
  cmd_swp->add_option("--m", swp_m, "Layer counts to sweep, e.g. 2 or 2,4");
  cmd_swp->callback([&] {
    const auto cfg = resolve_config(swp_args);
    rvox::pipeline::difficulty_sweep(cfg, parse_int_list(swp_n),
                                     parse_int_list(swp_m));
    std::cout << cfg.out_dir << "/sweep.csv\n";
  });

  // --- eval ---------------------------------------------------------------------
  auto* cmd_evl = app.add_subcommand(
      "eval", "Evaluate a checkpoint's restoration MSE over a pairs dataset");
  std::string evl_ckpt, evl_data, evl_out = "eval.csv";
  cmd_evl->add_option("--ckpt", evl_ckpt, "Checkpoint file")->required();
  cmd_evl->add_option("--data", evl_data, "Dataset directory (contains pairs/)")->required();
  cmd_evl->add_option("--csv", evl_out, "Output CSV path");
  cmd_evl->callback([&] {
    const auto res = rvox::pipeline::evaluate_restoration(evl_ckpt, evl_data, evl_out);
    std::cerr << "mean mse " << res.mse << "\n";
    std::cout << evl_out << "\n";
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const rvox::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const rvox::DomainError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
}
