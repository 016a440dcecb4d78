#pragma once

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "csmoe/config.hpp"
#include "csmoe/hash.hpp"
#include "csmoe/model.hpp"
#include "csmoe/params.hpp"

namespace csmoe {

struct TrainState {
  LanguageModel model;
  Optimizer optimizer;
  std::size_t step = 0;
};

inline TrainState init_state(const RunConfig& cfg) {
  return TrainState{LanguageModel(cfg.model, cfg.train.seed), Optimizer(OptimizerConfig{cfg.train.optimizer}), 0};
}

// Checkpoint layout: a text manifest terminated by an "end" line, then the
// arrays back to back as little-endian IEEE-754 doubles in manifest order.
//
//   csmoe-checkpoint
//   schema_version 1
//   step <t>
//   optimizer_steps <n>
//   config <one-line json>
//   array <name> <rank> <dims...>      (one per array)
//   payload_bytes <bytes>
//   checksum <fnv1a-64 of payload>
//   end
inline constexpr int kCheckpointSchema = 1;

struct LoadedCheckpoint {
  RunConfig config;
  TrainState state;
};

namespace detail {

inline void put_f64(std::string& out, double v) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

inline double get_f64(const char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<double>(bits);
}

inline std::vector<std::pair<std::string, const Tensor*>> checkpoint_arrays(const TrainState& s) {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (const auto& [n, t] : s.model.params().all()) out.push_back({"param/" + n, &t});
  for (const auto& [n, t] : s.optimizer.moment1()) out.push_back({"adam_m/" + n, &t});
  for (const auto& [n, t] : s.optimizer.moment2()) out.push_back({"adam_v/" + n, &t});
  return out;
}

}  // namespace detail

inline std::string serialize_checkpoint(const TrainState& state, const RunConfig& cfg) {
  std::string payload;
  std::ostringstream man;
  man << "csmoe-checkpoint\n";
  man << "schema_version " << kCheckpointSchema << "\n";
  man << "step " << state.step << "\n";
  man << "optimizer_steps " << state.optimizer.steps() << "\n";
  man << "config " << config_to_json(cfg).dump() << "\n";
  for (const auto& [name, t] : detail::checkpoint_arrays(state)) {
    man << "array " << name << ' ' << t->shape().size();
    for (auto d : t->shape()) man << ' ' << d;
    man << "\n";
    for (double v : t->values()) detail::put_f64(payload, v);
  }
  man << "payload_bytes " << payload.size() << "\n";
  man << "checksum " << hex64(fnv1a(payload)) << "\n";
  man << "end\n";
  return man.str() + payload;
}

inline void save_checkpoint(const std::string& path, const TrainState& state, const RunConfig& cfg) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot write checkpoint " + path);
  const std::string bytes = serialize_checkpoint(state, cfg);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw CheckpointError("failed writing checkpoint " + path);
}

inline LoadedCheckpoint deserialize_checkpoint(const std::string& bytes) {
  std::size_t pos = 0;
  auto next_line = [&]() -> std::string {
    auto nl = bytes.find('\n', pos);
    if (nl == std::string::npos) throw CheckpointCorruptionError("checkpoint manifest is truncated");
    std::string line = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    return line;
  };
  if (next_line() != "csmoe-checkpoint") throw CheckpointCorruptionError("not a checkpoint file");

  struct ArraySpec {
    std::string name;
    Shape shape;
  };
  std::vector<ArraySpec> arrays;
  std::string config_json, checksum;
  std::size_t step = 0, opt_steps = 0, payload_bytes = 0;
  bool have_version = false, have_payload = false;
  for (std::string line = next_line(); line != "end"; line = next_line()) {
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "schema_version") {
      int v = 0;
      ls >> v;
      if (v != kCheckpointSchema) {
        throw CheckpointVersionError("checkpoint schema version " + std::to_string(v) + " is not supported (expected " +
                                     std::to_string(kCheckpointSchema) + ")");
      }
      have_version = true;
    } else if (key == "step") {
      ls >> step;
    } else if (key == "optimizer_steps") {
      ls >> opt_steps;
    } else if (key == "config") {
      config_json = line.substr(7);
    } else if (key == "array") {
      ArraySpec a;
      std::size_t rank = 0;
      ls >> a.name >> rank;
      for (std::size_t i = 0; i < rank; ++i) {
        std::size_t d = 0;
        ls >> d;
        a.shape.push_back(d);
      }
      if (!ls || rank == 0) throw CheckpointCorruptionError("bad array line: " + line);
      arrays.push_back(std::move(a));
    } else if (key == "payload_bytes") {
      ls >> payload_bytes;
      have_payload = true;
    } else if (key == "checksum") {
      ls >> checksum;
    } else {
      throw CheckpointCorruptionError("unknown manifest key '" + key + "'");
    }
  }
  if (!have_version) throw CheckpointVersionError("checkpoint has no schema_version");
  if (!have_payload) throw CheckpointCorruptionError("checkpoint has no payload size");
  if (bytes.size() - pos != payload_bytes) {
    throw CheckpointCorruptionError("checkpoint payload has " + std::to_string(bytes.size() - pos) + " bytes, manifest says " +
                                    std::to_string(payload_bytes));
  }
  const std::string_view payload(bytes.data() + pos, payload_bytes);
  if (hex64(fnv1a(payload)) != checksum) throw CheckpointCorruptionError("checkpoint checksum mismatch");

  LoadedCheckpoint out;
  try {
    out.config = config_from_json(Json::parse(config_json));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointCorruptionError(std::string("checkpoint config echo is not valid JSON: ") + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointCorruptionError(std::string("checkpoint config echo is invalid: ") + e.what());
  }

  ParamStore params;
  Optimizer opt(OptimizerConfig{out.config.train.optimizer});
  std::size_t off = 0;
  for (const auto& a : arrays) {
    const std::size_t n = shape_size(a.shape);
    if (off + 8 * n > payload.size()) throw CheckpointCorruptionError("array " + a.name + " runs past the payload");
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = detail::get_f64(payload.data() + off + 8 * i);
    off += 8 * n;
    Tensor t(a.shape, std::move(v));
    auto slash = a.name.find('/');
    if (slash == std::string::npos) throw CheckpointCorruptionError("array name without section: " + a.name);
    const std::string section = a.name.substr(0, slash), name = a.name.substr(slash + 1);
    if (section == "param") params.add(name, std::move(t));
    else if (section == "adam_m") opt.moment1().emplace(name, std::move(t));
    else if (section == "adam_v") opt.moment2().emplace(name, std::move(t));
    else throw CheckpointCorruptionError("unknown array section: " + section);
  }
  if (off != payload.size()) throw CheckpointCorruptionError("payload has trailing bytes");
  opt.set_steps(opt_steps);

  LanguageModel probe(out.config.model, 0);
  for (const auto& [name, t] : probe.params().all()) {
    if (!params.contains(name) || params.at(name).shape() != t.shape()) {
      throw CheckpointCorruptionError("checkpoint parameters do not match the model config (" + name + ")");
    }
  }
  if (params.all().size() != probe.params().all().size()) throw CheckpointCorruptionError("checkpoint has extra parameters");
  out.state = TrainState{LanguageModel(out.config.model, std::move(params)), std::move(opt), step};
  return out;
}

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot read checkpoint " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace csmoe
