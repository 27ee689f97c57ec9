#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "json.hpp"

#include "dpnas/config.hpp"
#include "dpnas/data.hpp"
#include "dpnas/format.hpp"
#include "dpnas/prior.hpp"
#include "dpnas/qlearn.hpp"
#include "dpnas/train.hpp"

namespace dpnas {

template <typename T>
struct Dataset {
  std::vector<Tensor<T>> train_clean;
  std::vector<Sample<T>> val;   // center-cropped to the patch size
  std::vector<Sample<T>> test;  // full image size
};

namespace detail {

template <typename T>
std::vector<Tensor<T>> load_image_dir(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir))
    throw Error("image directory not found: " + dir.string());
  std::vector<std::string> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    const auto ext = e.path().extension().string();
    if (ext == ".pgm" || ext == ".ppm") files.push_back(e.path().string());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw Error("no PGM/PPM images in " + dir.string());
  std::vector<Tensor<T>> out;
  out.reserve(files.size());
  for (const auto& f : files) out.push_back(load_pnm<T>(f));
  return out;
}

}  // namespace detail

template <typename T>
Dataset<T> build_dataset(const SearchConfig& cfg) {
  std::vector<Tensor<T>> val_clean, test_clean;
  Dataset<T> ds;
  if (cfg.data_dir.empty()) {
    ds.train_clean = synth_images<T>(cfg.train_images, cfg.image_size,
                                     derive_seed(cfg.seed, {1}),
                                     cfg.image_channels);
    val_clean = synth_images<T>(cfg.val_images, cfg.image_size,
                                derive_seed(cfg.seed, {2}), cfg.image_channels);
    test_clean = synth_images<T>(cfg.test_images, cfg.image_size,
                                 derive_seed(cfg.seed, {4}),
                                 cfg.image_channels);
  } else {
    const std::filesystem::path root(cfg.data_dir);
    ds.train_clean = detail::load_image_dir<T>(root / "train");
    val_clean = detail::load_image_dir<T>(root / "val");
    test_clean = detail::load_image_dir<T>(root / "test");
  }
  RngStream val_noise(derive_seed(cfg.seed, {3}));
  for (auto& img : val_clean) {
    Sample<T> s;
    s.clean = center_crop(img, cfg.patch);
    s.noisy = add_awgn(s.clean, cfg.noise_sigma, val_noise);
    ds.val.push_back(std::move(s));
  }
  RngStream test_noise(derive_seed(cfg.seed, {5}));
  for (auto& img : test_clean) {
    Sample<T> s;
    s.noisy = add_awgn(img, cfg.noise_sigma, test_noise);
    s.clean = std::move(img);
    ds.test.push_back(std::move(s));
  }
  return ds;
}

// Analytic stand-in for PSNR_EarlyStop used by the statistical agent tests.
// A receptive-field proxy: a convolution that consumes the directly
// preceding feature (pred1 == index-1) deepens the sequential receptive
// field and pays a flat per-layer amount; convolutions wired elsewhere and
// all other ops contribute small diminishing diversity terms. The scale is
// deliberately close to the parameter penalty so that depth only pays when
// the layers are useful: long sequential chains are vanishingly rare under
// uniform sampling yet each link is learnable on its own, which is what the
// agent-vs-random tests lean on.
inline double surrogate_psnr(const BlockGraph& g) {
  std::map<int, int> seen;
  double sum = 0.2;
  for (int l = 1; l <= g.n_layers(); ++l) {
    if (!g.is_active(l)) continue;
    const auto& c = g.code(l);
    if (c.op == OpType::kConvolution) {
      const double w = c.kernel == 3 ? 1.0 : 0.5;
      if (c.pred1 != l - 1) {
        sum += 0.05 * w;  // wired past the previous feature: no chain
      } else if (c.pred1 == 0 ||
                 g.code(c.pred1).op == OpType::kConvolution) {
        sum += 2.2 * w;  // extends the sequential receptive field
      } else {
        sum += 0.8 * w;  // restarts a chain after a non-conv layer
      }
      continue;
    }
    double base = 0.0;
    switch (c.op) {
      case OpType::kDownsampling: base = 0.05; break;
      case OpType::kUpsampling: base = 0.05; break;
      case OpType::kIdentity: base = 0.01; break;
      case OpType::kElementalAdd: base = 0.04; break;
      case OpType::kConcat: base = 0.03; break;
      case OpType::kTerminal1: base = 0.05; break;
      case OpType::kTerminal2: base = 0.3; break;
      default: break;
    }
    if (is_terminal(c.op)) {
      sum += base;
      continue;
    }
    sum += base * std::pow(0.5, seen[static_cast<int>(c.op)]++);
  }
  return sum;
}

struct CandidateRecord {
  int episode = 0;
  double epsilon = 0.0;
  std::vector<NscCode> codes;
  std::int64_t params = 0;
  double psnr = 0.0;  // meaningless when !ok
  double reward = 0.0;
  bool ok = false;
  std::string fail_reason;
};

inline std::string csv_quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    out += c;
    if (c == '"') out += '"';
  }
  out += '"';
  return out;
}

inline std::string log_csv(const std::vector<CandidateRecord>& recs) {
  std::string out = "episode,epsilon,nsc,params,psnr,reward,status\n";
  for (const auto& r : recs) {
    out += std::to_string(r.episode);
    out += ',';
    out += fmt_double(r.epsilon);
    out += ',';
    out += csv_quote(codes_to_json(r.codes).dump());
    out += ',';
    out += std::to_string(r.params);
    out += ',';
    if (r.ok) out += fmt_double(r.psnr);
    out += ',';
    out += fmt_double(r.reward);
    out += ',';
    out += r.ok ? "ok" : "failed";
    out += '\n';
  }
  return out;
}

struct SearchReport {
  std::vector<CandidateRecord> records;
  int selected = -1;  // index into records
  std::vector<int> top;

  const CandidateRecord& selected_record() const { return records[selected]; }
};

inline constexpr const char* kSearchCkptMagic = "dpnas-search-ckpt";

template <typename T>
class Searcher {
 public:
  explicit Searcher(SearchConfig cfg)
      : cfg_(std::move(cfg)), ds_(build_dataset<T>(cfg_)),
        schedule_(EpsilonSchedule::table7(cfg_.episodes)),
        agent_(cfg_.search_space(),
               {cfg_.image_channels, cfg_.patch, cfg_.patch}, agent_config(),
               derive_seed(cfg_.seed, {30})) {}

  const Dataset<T>& dataset() const { return ds_; }
  const Agent& agent() const { return agent_; }
  const EpsilonSchedule& schedule() const { return schedule_; }

  // Trains (or scores) one sampled architecture. Pure given (codes, t);
  // safe to call from worker threads.
  CandidateRecord evaluate_candidate(const std::vector<NscCode>& codes, int t,
                                     double eps) const {
    CandidateRecord rec;
    rec.episode = t;
    rec.epsilon = eps;
    rec.codes = codes;
    const auto vr = validate(codes, cfg_.max_layers);
    if (!vr.ok()) {
      rec.fail_reason = "invalid";
      return rec;
    }
    const auto pruned = prune_inactive(*vr.graph);
    ShapePlan plan;
    try {
      plan = infer_shapes(pruned,
                          {cfg_.image_channels, cfg_.patch, cfg_.patch},
                          cfg_.dmm_mode, cfg_.base_width);
    } catch (const ShapeMismatchError& e) {
      rec.fail_reason = e.what();
      return rec;
    }
    rec.params = count_params(pruned, plan);
    if (cfg_.surrogate) {
      rec.psnr = surrogate_psnr(pruned);
      rec.ok = true;
      return rec;
    }
    try {
      BlockNet<T> net(pruned, plan,
                      derive_seed(cfg_.seed, {11, static_cast<std::uint64_t>(t)}));
      PatchSampler<T> data(
          &ds_.train_clean, cfg_.noise_sigma, cfg_.patch, cfg_.batch_size,
          RngStream(derive_seed(cfg_.seed, {10, static_cast<std::uint64_t>(t)})));
      const auto out = train_candidate(
          net, data, ds_.val, cfg_.candidate_budget,
          {cfg_.early_stop_interval, cfg_.early_stop_patience},
          cfg_.candidate_lr);
      rec.psnr = out.psnr_early_stop;
      rec.ok = true;
    } catch (const NonFiniteLossError& e) {
      rec.fail_reason = e.what();
    } catch (const ShapeMismatchError& e) {
      rec.fail_reason = e.what();
    }
    return rec;
  }

  SearchReport run(const std::string& checkpoint_dir = "") {
    const RewardConfig rcfg = reward_config();
    for (int t = next_episode_; t < cfg_.episodes;) {
      const int w = std::min(cfg_.workers, cfg_.episodes - t);
      std::vector<std::vector<NscCode>> episode(w);
      std::vector<double> eps(w);
      for (int i = 0; i < w; ++i) {
        eps[i] = schedule_.at(t + i);
        episode[i] = agent_.sample_episode(eps[i]);
      }
      std::vector<CandidateRecord> recs(w);
      std::vector<int> finish_order;
      if (w == 1) {
        recs[0] = evaluate_candidate(episode[0], t, eps[0]);
        finish_order.push_back(0);
      } else {
        std::mutex mu;
        std::vector<std::thread> pool;
        pool.reserve(w);
        for (int i = 0; i < w; ++i)
          pool.emplace_back([&, i]() {
            auto r = evaluate_candidate(episode[i], t + i, eps[i]);
            std::lock_guard<std::mutex> lk(mu);
            recs[i] = std::move(r);
            finish_order.push_back(i);
          });
        for (auto& th : pool) th.join();
      }
      // agent updates follow completion order; the log stays in episode order
      for (int i : finish_order) {
        auto& rec = recs[i];
        std::vector<double> layer_rewards(rec.codes.size(), rcfg.floor);
        if (rec.ok) {
          const auto pruned =
              prune_inactive(*validate(rec.codes, cfg_.max_layers).graph);
          std::vector<bool> active;
          for (int l = 1; l <= pruned.n_layers(); ++l)
            active.push_back(pruned.is_active(l));
          const auto rw = compute_reward(rec.psnr, static_cast<double>(rec.params),
                                         active, rcfg);
          rec.reward = rw.r_total;
          layer_rewards = rw.per_layer;
        } else {
          rec.reward = rcfg.floor;
        }
        agent_.store_episode(rec.codes, layer_rewards);
        agent_.maybe_update();
      }
      for (int i = 0; i < w; ++i) records_.push_back(std::move(recs[i]));
      t += w;
      next_episode_ = t;
      if (!checkpoint_dir.empty() && cfg_.checkpoint_interval > 0 &&
          t % cfg_.checkpoint_interval == 0 && t < cfg_.episodes)
        checkpoint(std::filesystem::path(checkpoint_dir) /
                   ("search_" + std::to_string(t) + ".json"));
    }
    SearchReport rep;
    rep.records = records_;
    rep.top = top_indices(cfg_.top_k);
    rep.selected = select_index();
    return rep;
  }

  // selection rule: best metric among successful candidates of the final
  // exploitation phase, falling back to the whole run; ties keep the
  // earliest episode
  int select_index() const {
    const int final_start = cfg_.episodes - schedule_.phase_count(9);
    int best = best_index([&](const CandidateRecord& r) {
      return r.episode >= final_start;
    });
    if (best < 0) best = best_index([](const CandidateRecord&) { return true; });
    if (best < 0) throw Error("search produced no successful candidate");
    return best;
  }

  std::vector<int> top_indices(int k) const {
    std::vector<int> idx;
    for (std::size_t i = 0; i < records_.size(); ++i)
      if (records_[i].ok) idx.push_back(static_cast<int>(i));
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
      const double ma = metric(records_[a]);
      const double mb = metric(records_[b]);
      if (ma != mb) return ma > mb;
      return records_[a].episode < records_[b].episode;
    });
    if (static_cast<int>(idx.size()) > k) idx.resize(k);
    return idx;
  }

  void checkpoint(const std::filesystem::path& path) const {
    nlohmann::json j;
    j["magic"] = kSearchCkptMagic;
    j["version"] = 1;
    j["next_episode"] = next_episode_;
    j["agent"] = agent_.to_json();
    j["config"] = config_to_json(cfg_);
    nlohmann::json recs = nlohmann::json::array();
    for (const auto& r : records_) {
      nlohmann::json e = {{"episode", r.episode}, {"epsilon", r.epsilon},
                          {"nsc", codes_to_json(r.codes)},
                          {"params", r.params}, {"reward", r.reward},
                          {"ok", r.ok}};
      if (r.ok)
        e["psnr"] = r.psnr;
      else
        e["fail"] = r.fail_reason;
      recs.push_back(std::move(e));
    }
    j["records"] = std::move(recs);
    std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path);
    if (!os) throw Error("cannot open for writing: " + path.string());
    os << j.dump(2) << "\n";
  }

  void resume(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw CheckpointError("cannot open checkpoint: " + path);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
      throw CheckpointError(std::string("corrupt search checkpoint: ") +
                            e.what());
    }
    try {
      if (j.at("magic").get<std::string>() != kSearchCkptMagic)
        throw CheckpointError("not a search checkpoint");
      const int version = j.at("version").get<int>();
      if (version != 1)
        throw VersionMismatchError("unsupported search checkpoint version " +
                                   std::to_string(version));
      if (j.at("config") != config_to_json(cfg_))
        throw CheckpointError("checkpoint was written with a different config");
      agent_.restore(j.at("agent"));
      next_episode_ = j.at("next_episode").get<int>();
      records_.clear();
      for (const auto& e : j.at("records")) {
        CandidateRecord r;
        r.episode = e.at("episode").get<int>();
        r.epsilon = e.at("epsilon").get<double>();
        r.codes = codes_from_json(e.at("nsc"));
        r.params = e.at("params").get<std::int64_t>();
        r.reward = e.at("reward").get<double>();
        r.ok = e.at("ok").get<bool>();
        if (r.ok)
          r.psnr = e.at("psnr").get<double>();
        else
          r.fail_reason = e.value("fail", "");
        records_.push_back(std::move(r));
      }
    } catch (const nlohmann::json::exception& e) {
      throw CheckpointError(std::string("corrupt search checkpoint: ") +
                            e.what());
    }
  }

  RewardConfig reward_config() const {
    RewardConfig rc;
    rc.mu = cfg_.effective_mu();
    return rc;
  }

 private:
  double metric(const CandidateRecord& r) const {
    return cfg_.selection == "psnr" ? r.psnr : r.reward;
  }

  template <typename Pred>
  int best_index(Pred&& want) const {
    int best = -1;
    for (std::size_t i = 0; i < records_.size(); ++i) {
      const auto& r = records_[i];
      if (!r.ok || !want(r)) continue;
      if (best < 0 || metric(r) > metric(records_[best]))
        best = static_cast<int>(i);
    }
    return best;
  }

  AgentConfig agent_config() const {
    AgentConfig a;
    a.alpha = cfg_.alpha;
    a.gamma = cfg_.gamma;
    a.batch = cfg_.update_batch;
    a.update_start = cfg_.update_start;
    a.replay_capacity = static_cast<std::size_t>(cfg_.replay_capacity);
    return a;
  }

  SearchConfig cfg_;
  Dataset<T> ds_;
  EpsilonSchedule schedule_;
  Agent agent_;
  std::vector<CandidateRecord> records_;
  int next_episode_ = 0;

 public:
  // run-directory writer: everything needed to audit or resume the run;
  // timestamps live only in meta.json
  SearchReport run_dir(const std::filesystem::path& dir,
                       const std::string& resume_path = "") {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    fs::create_directories(dir / "checkpoints");
    fs::create_directories(dir / "top_k");
    const std::string started = timestamp();
    write_text(dir / "config.json", config_to_json(cfg_).dump(2) + "\n");
    if (!resume_path.empty()) resume(resume_path);
    const auto rep = run((dir / "checkpoints").string());
    checkpoint(dir / "checkpoints" / "search_final.json");
    write_text(dir / "log.csv", log_csv(rep.records));
    write_text(dir / "qtable.json", agent_.table().to_json().dump(2) + "\n");
    std::string topcsv = "rank,episode,params,psnr,reward\n";
    for (std::size_t i = 0; i < rep.top.size(); ++i) {
      const auto& r = rep.records[rep.top[i]];
      topcsv += std::to_string(i + 1) + "," + std::to_string(r.episode) + "," +
                std::to_string(r.params) + "," + fmt_double(r.psnr) + "," +
                fmt_double(r.reward) + "\n";
      write_text(dir / "top_k" / ("arch_" + std::to_string(i + 1) + ".json"),
                 codes_to_json(r.codes).dump(2) + "\n");
    }
    write_text(dir / "top_k" / "top_k.csv", topcsv);
    write_text(dir / "selected_arch.json",
               codes_to_json(rep.selected_record().codes).dump(2) + "\n");
    nlohmann::json meta = {{"started", started}, {"finished", timestamp()}};
    write_text(dir / "meta.json", meta.dump(2) + "\n");
    return rep;
  }

  static void write_text(const std::filesystem::path& path,
                         const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open for writing: " + path.string());
    os << text;
  }

  static std::string timestamp() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t tt = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::tm tm{};
    gmtime_r(&tt, &tm);
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
  }
};

template <typename T>
struct FullTrainOutcome {
  PriorModel<T> model;
  ModelMeta meta;
  EvalReport<T> eval;
  std::vector<MetricsRow> metrics;
};

template <typename T>
FullTrainOutcome<T> run_full_training(const SearchConfig& cfg,
                                      const std::vector<NscCode>& codes,
                                      const Dataset<T>& ds) {
  const int bound = std::max(cfg.max_layers, static_cast<int>(codes.size()));
  const auto vr = validate(codes, bound);
  if (!vr.ok()) {
    std::string msg = "architecture invalid:";
    for (const auto& i : vr.issues) msg += " " + i.message + ";";
    throw ValidationError(msg);
  }
  const auto pruned = prune_inactive(*vr.graph);
  const auto plan =
      infer_shapes(pruned, {cfg.image_channels, cfg.patch, cfg.patch},
                   cfg.dmm_mode, cfg.base_width);

  FullTrainOutcome<T> out;
  out.model = PriorModel<T>(pruned, plan, cfg.k, derive_seed(cfg.seed, {20}));
  PatchSampler<T> data(&ds.train_clean, cfg.noise_sigma, cfg.patch,
                       cfg.batch_size, RngStream(derive_seed(cfg.seed, {21})));
  TrainFullOptions opt;
  opt.iterations = cfg.full_train_iters;
  opt.steps_per_epoch = cfg.steps_per_epoch;
  opt.lr0 = cfg.full_lr;
  opt.metrics_interval = cfg.metrics_interval;
  out.metrics = train_full(out.model, data, ds.val, opt);

  out.meta.codes = codes;
  out.meta.k = cfg.k;
  out.meta.base_width = cfg.base_width;
  out.meta.image_channels = cfg.image_channels;
  out.meta.input_h = cfg.patch;
  out.meta.input_w = cfg.patch;
  out.meta.mode = cfg.dmm_mode;
  out.meta.seed = derive_seed(cfg.seed, {20});
  out.meta.iteration = cfg.full_train_iters;
  const auto st = data.rng().state();
  out.meta.extra = {{"sampler_rng", {st[0], st[1], st[2], st[3]}}};

  if (cfg.image_size != cfg.patch) {
    auto wide = reshaped_prior(out.model, out.meta, cfg.image_size,
                               cfg.image_size);
    out.eval = evaluate(wide, ds.test);
  } else {
    out.eval = evaluate(out.model, ds.test);
  }
  return out;
}

template <typename T>
std::vector<std::pair<int, double>> run_k_sweep(const SearchConfig& cfg,
                                                const std::vector<NscCode>& codes,
                                                const Dataset<T>& ds,
                                                const std::vector<int>& ks) {
  std::vector<std::pair<int, double>> rows;
  for (int k : ks) {
    SearchConfig c = cfg;
    c.k = k;
    rows.emplace_back(k, run_full_training<T>(c, codes, ds).eval.mean_psnr);
  }
  return rows;
}

inline std::string k_sweep_csv(const std::vector<std::pair<int, double>>& rows) {
  std::string out = "k,psnr\n";
  for (const auto& [k, p] : rows)
    out += std::to_string(k) + "," + fmt_double(p) + "\n";
  return out;
}

}  // namespace dpnas
