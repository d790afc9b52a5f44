#pragma once

// Checkpoint container:
//   8 bytes  magic "PEDSEGCK"
//   u32      format version
//   u64      JSON header length
//   ...      JSON header (spec, counters, rng, tensor table)
//   ...      float32 little-endian payload, tensors in table order

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pedseg/error.hpp"
#include "pedseg/nn/model.hpp"
#include "pedseg/nn/optimizer.hpp"

namespace pedseg::nn {

struct Checkpoint {
  Model model;
  Optimizer optimizer;
  std::uint64_t step = 0;
  int epoch = 0;
  std::array<double, 3> best_val_dice{0.0, 0.0, 0.0};
  double best_score = -1.0;
  int validations_since_improvement = 0;
  std::uint64_t seed = 0;
  nlohmann::json extra = nlohmann::json::object();
};

inline constexpr char kCheckpointMagic[8] = {'P', 'E', 'D', 'S', 'E', 'G', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  nlohmann::json header;
  header["format"] = "pedseg-checkpoint";
  header["spec"] = ck.model.spec();
  header["step"] = ck.step;
  header["epoch"] = ck.epoch;
  header["best_val_dice"] = ck.best_val_dice;
  header["best_score"] = ck.best_score;
  header["validations_since_improvement"] = ck.validations_since_improvement;
  const auto& oc = ck.optimizer.config();
  header["optimizer"] = {{"kind", oc.kind},   {"learning_rate", oc.learning_rate}, {"weight_decay", oc.weight_decay},
                         {"beta1", oc.beta1}, {"beta2", oc.beta2},                 {"eps", oc.eps},
                         {"steps", ck.optimizer.steps()}};
  // Every random draw during training is derived from (seed, step), so the
  // pair fully restores the random streams.
  header["rng"] = {{"seed", ck.seed}, {"derivation", "seed_seq(seed, step, purpose)"}, {"next_step", ck.step}};
  header["extra"] = ck.extra;

  nlohmann::json table = nlohmann::json::array();
  std::vector<const std::vector<float>*> blobs;
  std::uint64_t offset = 0;
  auto add = [&](const std::string& section, const Parameter& p, const std::vector<float>& data) {
    table.push_back({{"name", section + ":" + p.name}, {"shape", p.shape}, {"offset", offset}, {"count", data.size()}});
    offset += data.size();
    blobs.push_back(&data);
  };
  const auto& params = ck.model.parameters();
  for (const auto& p : params) add("param", p, p.value);
  if (ck.optimizer.first_moments().size() == params.size())
    for (std::size_t i = 0; i < params.size(); ++i) {
      add("adam_m", params[i], ck.optimizer.first_moments()[i]);
      add("adam_v", params[i], ck.optimizer.second_moments()[i]);
    }
  header["tensors"] = table;

  const std::string text = header.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::MissingFile, "cannot write " + tmp.string());
    out.write(kCheckpointMagic, sizeof kCheckpointMagic);
    const std::uint32_t version = kCheckpointVersion;
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto* b : blobs)
      out.write(reinterpret_cast<const char*>(b->data()), static_cast<std::streamsize>(b->size() * sizeof(float)));
    if (!out) throw Error(ErrorCode::CorruptFile, "short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error(ErrorCode::MissingCheckpoint, path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::MissingCheckpoint, path.string());
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(magic, 8);
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0 || version != kCheckpointVersion || len > (1u << 30))
    throw Error(ErrorCode::CorruptFile, "not a checkpoint: " + path.string());
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::CorruptFile, std::string("checkpoint header: ") + e.what());
  }

  Checkpoint ck;
  const auto spec = header.at("spec").get<ArchitectureSpec>();
  ck.model = Model(spec, 0);
  ck.step = header.at("step").get<std::uint64_t>();
  ck.epoch = header.at("epoch").get<int>();
  ck.best_val_dice = header.at("best_val_dice").get<std::array<double, 3>>();
  ck.best_score = header.at("best_score").get<double>();
  ck.validations_since_improvement = header.value("validations_since_improvement", 0);
  ck.seed = header.at("rng").at("seed").get<std::uint64_t>();
  ck.extra = header.value("extra", nlohmann::json::object());
  const auto& oj = header.at("optimizer");
  OptimizerConfig oc;
  oc.kind = oj.at("kind").get<std::string>();
  oc.learning_rate = oj.at("learning_rate").get<double>();
  oc.weight_decay = oj.at("weight_decay").get<double>();
  oc.beta1 = oj.at("beta1").get<double>();
  oc.beta2 = oj.at("beta2").get<double>();
  oc.eps = oj.at("eps").get<double>();
  ck.optimizer = Optimizer(oc, ck.model);
  ck.optimizer.set_steps(oj.at("steps").get<std::uint64_t>());

  std::vector<float> payload;
  std::uint64_t total = 0;
  for (const auto& t : header.at("tensors")) total += t.at("count").get<std::uint64_t>();
  payload.resize(total);
  in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(total * sizeof(float)));
  if (!in) throw Error(ErrorCode::CorruptFile, "truncated checkpoint payload: " + path.string());

  auto& params = ck.model.parameters();
  for (const auto& t : header.at("tensors")) {
    const auto name = t.at("name").get<std::string>();
    const auto colon = name.find(':');
    const std::string section = name.substr(0, colon), pname = name.substr(colon + 1);
    auto it = std::find_if(params.begin(), params.end(), [&](const Parameter& p) { return p.name == pname; });
    if (it == params.end()) throw Error(ErrorCode::CorruptFile, "checkpoint tensor '" + pname + "' unknown to model");
    const auto idx = static_cast<std::size_t>(it - params.begin());
    const auto off = t.at("offset").get<std::uint64_t>();
    const auto count = t.at("count").get<std::uint64_t>();
    if (count != it->size() || off + count > total)
      throw Error(ErrorCode::CorruptFile, "checkpoint tensor '" + pname + "' has wrong size");
    std::vector<float>* dst = nullptr;
    if (section == "param") dst = &it->value;
    else if (section == "adam_m") dst = &ck.optimizer.first_moments()[idx];
    else if (section == "adam_v") dst = &ck.optimizer.second_moments()[idx];
    else throw Error(ErrorCode::CorruptFile, "unknown checkpoint section '" + section + "'");
    std::copy(payload.begin() + off, payload.begin() + off + count, dst->begin());
  }
  return ck;
}

}  // namespace pedseg::nn
