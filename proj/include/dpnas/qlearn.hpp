#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "dpnas/errors.hpp"
#include "dpnas/nsc.hpp"
#include "dpnas/rng.hpp"

namespace dpnas {

inline std::string action_key(const NscCode& c) {
  return std::to_string(c.index) + "," + std::to_string(static_cast<int>(c.op)) +
         "," + std::to_string(c.kernel) + "," + std::to_string(c.pred1) + "," +
         std::to_string(c.pred2);
}

// States pair the layer index with the previous layer's code ("S" at the
// start), so identical codes at different depths stay distinct.
inline std::string start_state_key() { return "1|S"; }

inline std::string state_key(int layer_index, const NscCode& prev) {
  return std::to_string(layer_index) + "|" + action_key(prev);
}

class QTable {
 public:
  double q(const std::string& s, const std::string& a) const {
    auto it = rows_.find(s);
    if (it == rows_.end()) return 0.0;
    auto jt = it->second.find(a);
    return jt == it->second.end() ? 0.0 : jt->second;
  }

  void set(const std::string& s, const std::string& a, double v) {
    rows_[s][a] = v;
  }

  // max over all actions from s; unseen actions read 0, and some action is
  // always unseen, so the max is floored at 0.
  double max_next(const std::string& s) const {
    double m = 0.0;
    auto it = rows_.find(s);
    if (it != rows_.end())
      for (const auto& [a, v] : it->second) m = std::max(m, v);
    return m;
  }

  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& [s, row] : rows_) n += row.size();
    return n;
  }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [s, row] : rows_)
      for (const auto& [a, v] : row) j[s + "|" + a] = v;
    return j;
  }

  static QTable from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ParseError("qtable: expected an object");
    QTable t;
    for (const auto& [key, v] : j.items()) {
      const auto cut = key.rfind('|');
      if (cut == std::string::npos || !v.is_number())
        throw ParseError("qtable: bad entry " + key);
      t.rows_[key.substr(0, cut)][key.substr(cut + 1)] = v.get<double>();
    }
    return t;
  }

  const std::map<std::string, std::map<std::string, double>>& rows() const {
    return rows_;
  }

 private:
  std::map<std::string, std::map<std::string, double>> rows_;
};

struct Transition {
  std::string state;
  NscCode action;
  double reward = 0.0;
  std::string next_state;
  bool terminal = false;
};

class ReplayMemory {
 public:
  explicit ReplayMemory(std::size_t capacity = 2000) : capacity_(capacity) {}

  void push(Transition t) {
    buf_.push_back(std::move(t));
    while (buf_.size() > capacity_) buf_.pop_front();
  }

  std::size_t size() const { return buf_.size(); }
  std::size_t capacity() const { return capacity_; }
  const Transition& at(std::size_t i) const { return buf_[i]; }

  // Uniform sample of min(n, size) distinct indices.
  std::vector<std::size_t> sample_indices(std::size_t n, RngStream& rng) const {
    std::vector<std::size_t> idx(buf_.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    const std::size_t take = std::min(n, idx.size());
    for (std::size_t i = 0; i < take; ++i) {
      const std::size_t j =
          i + static_cast<std::size_t>(rng.uniform_int(
                  static_cast<std::uint64_t>(idx.size() - i)));
      std::swap(idx[i], idx[j]);
    }
    idx.resize(take);
    return idx;
  }

  nlohmann::json to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& t : buf_)
      arr.push_back({{"s", t.state},
                     {"a", {t.action.index, static_cast<int>(t.action.op),
                            t.action.kernel, t.action.pred1, t.action.pred2}},
                     {"r", t.reward},
                     {"ns", t.next_state},
                     {"t", t.terminal}});
    return arr;
  }

  static ReplayMemory from_json(const nlohmann::json& j, std::size_t capacity) {
    if (!j.is_array()) throw ParseError("replay: expected an array");
    ReplayMemory m(capacity);
    for (const auto& e : j) {
      Transition t;
      t.state = e.at("s").get<std::string>();
      const auto& a = e.at("a");
      t.action = make_code(a.at(0).get<int>(),
                           static_cast<OpType>(a.at(1).get<int>()),
                           a.at(2).get<int>(), a.at(3).get<int>(),
                           a.at(4).get<int>());
      t.reward = e.at("r").get<double>();
      t.next_state = e.at("ns").get<std::string>();
      t.terminal = e.at("t").get<bool>();
      m.push(std::move(t));
    }
    return m;
  }

 private:
  std::size_t capacity_;
  std::deque<Transition> buf_;
};

struct EpsilonSchedule {
  std::vector<double> values;
  std::vector<int> boundaries;  // cumulative episode counts, one per phase

  static EpsilonSchedule table7(int total_episodes) {
    static constexpr int kCumPercent[10] = {50, 55, 60, 65, 70,
                                            75, 80, 85, 90, 100};
    EpsilonSchedule s;
    for (int i = 0; i < 10; ++i) {
      s.values.push_back((10 - i) / 10.0);
      s.boundaries.push_back(static_cast<int>(
          static_cast<std::int64_t>(total_episodes) * kCumPercent[i] / 100));
    }
    s.boundaries.back() = total_episodes;
    return s;
  }

  double at(int episode) const {
    for (std::size_t i = 0; i < boundaries.size(); ++i)
      if (episode < boundaries[i]) return values[i];
    return values.back();
  }

  int phase_count(int phase) const {
    return boundaries[phase] - (phase == 0 ? 0 : boundaries[phase - 1]);
  }
};

struct RewardConfig {
  double mu = 0.5;           // parameter-penalty weight; natural log
  double psnr_clamp = 60.0;  // dB
  double floor = 0.0;        // reward for invalid/aborted candidates
};

struct Reward {
  double r_total = 0.0;
  std::vector<double> per_layer;
};

inline Reward compute_reward(double psnr_early_stop, double params,
                             const std::vector<bool>& active,
                             const RewardConfig& cfg) {
  Reward r;
  r.r_total = std::min(psnr_early_stop, cfg.psnr_clamp) -
              cfg.mu * std::log(params);
  r.per_layer.reserve(active.size());
  for (bool on : active) r.per_layer.push_back(on ? r.r_total : 0.0);
  return r;
}

struct AgentConfig {
  double alpha = 0.01;
  double gamma = 1.0;
  int batch = 64;
  int update_start = 50;  // blocks stored before updates begin
  std::size_t replay_capacity = 2000;
};

class Agent {
 public:
  Agent(SearchSpace space, LayerDims input, AgentConfig cfg, std::uint64_t seed)
      : space_(std::move(space)), input_(input), cfg_(cfg),
        memory_(cfg.replay_capacity), rng_(seed) {}

  // One epsilon-greedy rollout through the legal-action sets. Greedy picks
  // the highest-Q action; ties break to the lowest code.
  std::vector<NscCode> sample_episode(double eps) {
    std::vector<NscCode> codes;
    EpisodeShapes shapes(input_);
    std::string state = start_state_key();
    for (int l = 1;; ++l) {
      const auto acts = legal_actions(l, shapes, space_);
      NscCode pick;
      if (rng_.uniform() < eps) {
        pick = acts[static_cast<std::size_t>(
            rng_.uniform_int(static_cast<std::uint64_t>(acts.size())))];
      } else {
        pick = acts[0];
        double best = table_.q(state, action_key(pick));
        for (std::size_t i = 1; i < acts.size(); ++i) {
          const double v = table_.q(state, action_key(acts[i]));
          if (v > best || (v == best && acts[i] < pick)) {
            best = v;
            pick = acts[i];
          }
        }
      }
      codes.push_back(pick);
      if (is_terminal(pick.op)) break;
      shapes.push(pick, space_.base_width, space_.image_channels);
      state = state_key(l + 1, pick);
    }
    return codes;
  }

  void store_episode(const std::vector<NscCode>& codes,
                     const std::vector<double>& layer_rewards) {
    std::string state = start_state_key();
    for (std::size_t i = 0; i < codes.size(); ++i) {
      Transition t;
      t.state = state;
      t.action = codes[i];
      t.reward = layer_rewards[i];
      t.terminal = is_terminal(codes[i].op);
      t.next_state = state_key(static_cast<int>(i) + 2, codes[i]);
      state = t.next_state;
      memory_.push(std::move(t));
    }
    episodes_stored_ += 1;
  }

  // One batched Bellman sweep once the warmup block count has passed.
  bool maybe_update() {
    if (episodes_stored_ <= cfg_.update_start || memory_.size() == 0)
      return false;
    update_batch();
    return true;
  }

  void update_batch() {
    const auto idx =
        memory_.sample_indices(static_cast<std::size_t>(cfg_.batch), rng_);
    for (const auto i : idx) apply_update(memory_.at(i));
  }

  void apply_update(const Transition& t) {
    const auto a = action_key(t.action);
    const double q = table_.q(t.state, a);
    double target = t.reward;
    if (!t.terminal) target += cfg_.gamma * table_.max_next(t.next_state);
    table_.set(t.state, a, (1.0 - cfg_.alpha) * q + cfg_.alpha * target);
  }

  const QTable& table() const { return table_; }
  QTable& table() { return table_; }
  const ReplayMemory& memory() const { return memory_; }
  int episodes_stored() const { return episodes_stored_; }
  const SearchSpace& space() const { return space_; }
  const AgentConfig& config() const { return cfg_; }
  RngStream& rng() { return rng_; }

  nlohmann::json to_json() const {
    const auto st = rng_.state();
    return {{"qtable", table_.to_json()},
            {"replay", memory_.to_json()},
            {"episodes_stored", episodes_stored_},
            {"rng", {st[0], st[1], st[2], st[3]}}};
  }

  void restore(const nlohmann::json& j) {
    table_ = QTable::from_json(j.at("qtable"));
    memory_ = ReplayMemory::from_json(j.at("replay"), cfg_.replay_capacity);
    episodes_stored_ = j.at("episodes_stored").get<int>();
    const auto& r = j.at("rng");
    rng_ = RngStream::from_state(
        {r.at(0).get<std::uint64_t>(), r.at(1).get<std::uint64_t>(),
         r.at(2).get<std::uint64_t>(), r.at(3).get<std::uint64_t>()});
  }

 private:
  SearchSpace space_;
  LayerDims input_;
  AgentConfig cfg_;
  QTable table_;
  ReplayMemory memory_;
  RngStream rng_;
  int episodes_stored_ = 0;
};

}  // namespace dpnas
