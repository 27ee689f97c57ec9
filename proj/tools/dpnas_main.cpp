#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "dpnas/config.hpp"
#include "dpnas/search.hpp"

namespace fs = std::filesystem;
using namespace dpnas;

namespace {

std::vector<NscCode> load_arch(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open for reading: " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("arch '" + path + "': " + e.what());
  }
  return codes_from_json(j);
}

struct CommonFlags {
  std::string config_path;
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;

  void attach(CLI::App* cmd) {
    cmd->add_option("-c,--config", config_path, "JSON config file");
    seed_opt = cmd->add_option("--seed", seed, "override the config seed");
  }

  SearchConfig resolve() const {
    SearchConfig cfg;
    if (!config_path.empty()) cfg = load_config(config_path);
    if (seed_opt && seed_opt->count() > 0) cfg.seed = seed;
    return cfg;
  }
};

template <typename F>
void with_precision(const SearchConfig& cfg, F&& f) {
  if (cfg.precision == "f64")
    f.template operator()<double>();
  else
    f.template operator()<float>();
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open for writing: " + path.string());
  os << text;
}

int run_search(const SearchConfig& cfg, const std::string& out_dir,
               const std::string& resume) {
  with_precision(cfg, [&]<typename T>() {
    Searcher<T> s(cfg);
    const auto rep = s.run_dir(out_dir, resume);
    const auto& sel = rep.selected_record();
    std::cout << "search finished: " << rep.records.size() << " candidates\n"
              << "selected episode " << sel.episode << ": reward "
              << fmt_double(sel.reward) << ", psnr " << fmt_double(sel.psnr)
              << ", params " << sel.params << "\n"
              << "run directory: " << out_dir << "\n";
  });
  return 0;
}

int run_train(const SearchConfig& cfg, const std::string& arch_path,
              const std::string& out_dir, const std::vector<int>& sweep) {
  const auto codes = load_arch(arch_path);
  fs::create_directories(out_dir);
  with_precision(cfg, [&]<typename T>() {
    const auto ds = build_dataset<T>(cfg);
    if (!sweep.empty()) {
      const auto rows = run_k_sweep<T>(cfg, codes, ds, sweep);
      write_file(fs::path(out_dir) / "k_sweep.csv", k_sweep_csv(rows));
      for (const auto& [k, p] : rows)
        std::cout << "K=" << k << ": test psnr " << fmt_double(p) << "\n";
    }
    auto out = run_full_training<T>(cfg, codes, ds);
    save_prior(fs::path(out_dir) / "model.ckpt", out.model, out.meta);
    write_metrics_csv((fs::path(out_dir) / "metrics.csv").string(),
                      out.metrics);
    nlohmann::json ev = {{"mean_psnr", out.eval.mean_psnr},
                         {"per_image", out.eval.per_image}};
    write_file(fs::path(out_dir) / "eval.json", ev.dump(2) + "\n");
    std::cout << "trained K=" << cfg.k << " model: test psnr "
              << fmt_double(out.eval.mean_psnr) << " over "
              << out.eval.per_image.size() << " images\n"
              << "artifacts in " << out_dir << "\n";
  });
  return 0;
}

template <typename T>
int eval_model_t(const std::string& model_path, const std::string& data_dir,
                 double sigma, std::uint64_t seed, int count) {
  auto [model, meta] = load_prior<T>(model_path);
  std::vector<Tensor<T>> clean;
  if (!data_dir.empty()) {
    clean = detail::load_image_dir<T>(data_dir);
  } else {
    clean = synth_images<T>(count, meta.input_h, derive_seed(seed, {4}),
                            meta.image_channels);
  }
  RngStream noise(derive_seed(seed, {5}));
  std::map<std::pair<int, int>, PriorModel<T>> sized;
  double mean = 0.0;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    const auto& img = clean[i];
    auto key = std::make_pair(img.h, img.w);
    if (!sized.count(key))
      sized.emplace(key, reshaped_prior(model, meta, img.h, img.w));
    std::vector<Sample<T>> one;
    one.push_back({add_awgn(img, sigma, noise), img});
    const auto rep = evaluate(sized.at(key), one);
    std::cout << "image " << i << ": psnr " << fmt_double(rep.per_image[0])
              << "\n";
    mean += rep.per_image[0];
  }
  if (clean.empty()) throw Error("evaluate: empty image set");
  mean /= static_cast<double>(clean.size());
  std::cout << "mean psnr: " << fmt_double(mean) << " over " << clean.size()
            << " images (sigma " << fmt_double(sigma) << ")\n";
  return 0;
}

int run_compile(const std::string& arch_path, bool emit_plan, bool emit_dot,
                bool no_prune, int size, int channels, int base_width,
                const std::string& mode_name) {
  const auto codes = load_arch(arch_path);
  const auto vr = validate(codes, std::max<int>(64, codes.size()));
  if (!vr.ok()) {
    for (const auto& i : vr.issues)
      std::cerr << "layer " << i.layer << ": " << i.message << "\n";
    throw ValidationError("architecture failed validation");
  }
  const auto g = no_prune ? *vr.graph : prune_inactive(*vr.graph);
  const auto plan = infer_shapes(g, {channels, size, size},
                                 dmm_mode_from_name(mode_name), base_width);
  if (emit_plan) std::cout << plan_to_json(plan).dump(2) << "\n";
  if (emit_dot) std::cout << to_dot(g, &plan);
  if (!emit_plan && !emit_dot) {
    int active = 0;
    for (int l = 1; l <= g.n_layers(); ++l)
      if (g.is_active(l)) ++active;
    std::cout << "layers: " << g.n_layers() << " (" << active << " active)\n"
              << "params: " << count_params(g, plan) << "\n"
              << "repairs: " << plan.repairs.size() << "\n";
  }
  return 0;
}

template <typename T>
int export_model_t(const std::string& model_path, const std::string& arch_out,
                   const std::string& input, const std::string& output) {
  auto [model, meta] = load_prior<T>(model_path);
  if (!arch_out.empty()) {
    write_file(arch_out, codes_to_json(meta.codes).dump(2) + "\n");
    std::cout << "architecture written to " << arch_out << "\n";
  }
  if (!input.empty()) {
    if (output.empty()) throw Error("--output is required with --input");
    const auto img = load_pnm<T>(input);
    auto m = reshaped_prior(model, meta, img.h, img.w);
    save_pnm(output, clamp01(m.forward(img)));
    std::cout << "denoised image written to " << output << "\n";
  }
  if (arch_out.empty() && input.empty())
    throw Error("nothing to export: pass --arch and/or --input/--output");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"block-level architecture search for image denoising"};
  app.require_subcommand(1);

  // search
  auto* search_cmd = app.add_subcommand("search", "run the architecture search");
  CommonFlags search_common;
  search_common.attach(search_cmd);
  std::string search_out = "dpnas_run";
  std::string search_resume;
  search_cmd->add_option("-o,--out", search_out, "run directory");
  search_cmd->add_option("--resume", search_resume, "search checkpoint to resume");
  int flag_episodes = 0;
  int flag_workers = 0;
  double flag_mu = 0.0;
  bool flag_surrogate = false;
  auto* ep_opt = search_cmd->add_option("--episodes", flag_episodes,
                                        "override episode count");
  auto* wk_opt = search_cmd->add_option("--workers", flag_workers,
                                        "override worker count");
  auto* mu_opt = search_cmd->add_option("--mu", flag_mu,
                                        "override the parameter penalty");
  search_cmd->add_flag("--surrogate", flag_surrogate,
                       "score candidates analytically (test harness)");

  // train
  auto* train_cmd = app.add_subcommand("train", "train the full prior model");
  CommonFlags train_common;
  train_common.attach(train_cmd);
  std::string train_arch;
  std::string train_out = "dpnas_train";
  std::string sweep_arg;
  int flag_k = 0;
  train_cmd->add_option("-a,--arch", train_arch, "architecture JSON")
      ->required();
  train_cmd->add_option("-o,--out", train_out, "output directory");
  train_cmd->add_option("--k-sweep", sweep_arg,
                        "comma-separated K values to sweep");
  auto* k_opt = train_cmd->add_option("-k,--stages", flag_k, "override K");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a model checkpoint");
  std::string eval_model, eval_dir;
  double eval_sigma = 25.0;
  std::uint64_t eval_seed = 1;
  int eval_count = 64;
  std::string eval_precision = "f32";
  eval_cmd->add_option("-m,--model", eval_model, "model checkpoint")
      ->required();
  eval_cmd->add_option("-d,--data", eval_dir,
                       "directory of clean PGM/PPM images");
  eval_cmd->add_option("--sigma", eval_sigma, "noise level (0-255 scale)");
  eval_cmd->add_option("--seed", eval_seed, "noise seed");
  eval_cmd->add_option("--count", eval_count,
                       "synthetic image count when no data dir is given");
  eval_cmd->add_option("--precision", eval_precision, "f32 or f64");

  // compile
  auto* compile_cmd =
      app.add_subcommand("compile", "validate and plan an architecture");
  std::string compile_arch;
  bool emit_plan = false, emit_dot = false, no_prune = false;
  int compile_size = 32, compile_channels = 1, compile_bw = 8;
  std::string compile_mode = "full";
  compile_cmd->add_option("-a,--arch", compile_arch, "architecture JSON")
      ->required();
  compile_cmd->add_flag("--emit-plan", emit_plan, "print the shape plan JSON");
  compile_cmd->add_flag("--emit-dot", emit_dot, "print the graph in DOT form");
  compile_cmd->add_flag("--no-prune", no_prune, "keep inactive layers");
  compile_cmd->add_option("--size", compile_size, "input spatial size");
  compile_cmd->add_option("--channels", compile_channels, "input channels");
  compile_cmd->add_option("--base-width", compile_bw, "conv channel width");
  compile_cmd->add_option("--dmm-mode", compile_mode, "full, off, or zero_pad");

  // export
  auto* export_cmd =
      app.add_subcommand("export", "extract artifacts from a checkpoint");
  std::string export_model, export_arch, export_in, export_out;
  std::string export_precision = "f32";
  export_cmd->add_option("-m,--model", export_model, "model checkpoint")
      ->required();
  export_cmd->add_option("--arch", export_arch,
                         "write the architecture JSON here");
  export_cmd->add_option("-i,--input", export_in, "PGM/PPM image to denoise");
  export_cmd->add_option("-o,--output", export_out, "denoised image path");
  export_cmd->add_option("--precision", export_precision, "f32 or f64");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*search_cmd) {
      SearchConfig cfg = search_common.resolve();
      if (ep_opt->count()) cfg.episodes = flag_episodes;
      if (wk_opt->count()) cfg.workers = flag_workers;
      if (mu_opt->count()) cfg.mu = flag_mu;
      if (flag_surrogate) cfg.surrogate = true;
      cfg.check();
      return run_search(cfg, search_out, search_resume);
    }
    if (*train_cmd) {
      SearchConfig cfg = train_common.resolve();
      if (k_opt->count()) cfg.k = flag_k;
      cfg.check();
      std::vector<int> sweep;
      if (!sweep_arg.empty()) {
        std::string tok;
        for (std::size_t i = 0; i <= sweep_arg.size(); ++i) {
          if (i == sweep_arg.size() || sweep_arg[i] == ',') {
            if (!tok.empty()) sweep.push_back(std::stoi(tok));
            tok.clear();
          } else {
            tok += sweep_arg[i];
          }
        }
      }
      return run_train(cfg, train_arch, train_out, sweep);
    }
    if (*eval_cmd) {
      if (eval_precision == "f64")
        return eval_model_t<double>(eval_model, eval_dir, eval_sigma,
                                    eval_seed, eval_count);
      return eval_model_t<float>(eval_model, eval_dir, eval_sigma, eval_seed,
                                 eval_count);
    }
    if (*compile_cmd)
      return run_compile(compile_arch, emit_plan, emit_dot, no_prune,
                         compile_size, compile_channels, compile_bw,
                         compile_mode);
    if (*export_cmd) {
      if (export_precision == "f64")
        return export_model_t<double>(export_model, export_arch, export_in,
                                      export_out);
      return export_model_t<float>(export_model, export_arch, export_in,
                                   export_out);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
