#pragma once

// Single-file parameter checkpoints and a directory store that keeps the k
// records with the lowest validation loss.
//
// File layout (little-endian): "MSCK", u32 version, u64 header length, JSON
// header, f32 payload (tensors in header order), u64 FNV-1a of all preceding bytes.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mscl/error.hpp"
#include "mscl/model.hpp"
#include "mscl/volume.hpp"

namespace mscl {

struct NamedTensor {
  std::string name;
  ag::Shape shape;
  std::vector<float> data;
};

struct CheckpointRecord {
  int epoch = 0;
  double validation_loss = 0;
  std::string objective;
  nlohmann::json spec;  // echo of the model/objective configuration
  std::vector<NamedTensor> tensors;

  int id() const { return epoch; }
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <class T>
std::vector<NamedTensor> snapshot_parameters(const ParameterSet<T>& ps) {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < ps.names.size(); ++i) {
    NamedTensor t{ps.names[i], ps.tensors[i].shape(), {}};
    for (T v : ps.tensors[i].value()) t.data.push_back(static_cast<float>(v));
    out.push_back(std::move(t));
  }
  return out;
}

template <class T>
void restore_parameters(ParameterSet<T>& ps, const std::vector<NamedTensor>& tensors) {
  if (tensors.size() != ps.names.size())
    throw IntegrityError("checkpoint holds " + std::to_string(tensors.size()) + " tensors, model expects " +
                         std::to_string(ps.names.size()));
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (tensors[i].name != ps.names[i] || tensors[i].shape != ps.tensors[i].shape())
      throw IntegrityError("checkpoint tensor " + tensors[i].name + " " + ag::to_string(tensors[i].shape) +
                           " does not match model tensor " + ps.names[i] + " " +
                           ag::to_string(ps.tensors[i].shape()));
    auto dst = ps.tensors[i].value_mut();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<T>(tensors[i].data[k]);
  }
}

inline std::string encode_checkpoint(const CheckpointRecord& r) {
  nlohmann::json h;
  h["epoch"] = r.epoch;
  h["validation_loss"] = r.validation_loss;
  h["objective"] = r.objective;
  h["spec"] = r.spec;
  h["tensors"] = nlohmann::json::array();
  for (const auto& t : r.tensors) {
    if (t.data.size() != ag::numel(t.shape)) throw ConfigError("checkpoint tensor " + t.name + ": size/shape mismatch");
    h["tensors"].push_back({{"name", t.name}, {"shape", t.shape}});
  }
  const std::string header = h.dump();
  std::ostringstream os(std::ios::binary);
  os.write("MSCK", 4);
  io_detail::put_le<std::uint32_t>(os, kCheckpointVersion);
  io_detail::put_le<std::uint64_t>(os, header.size());
  os.write(header.data(), std::streamsize(header.size()));
  for (const auto& t : r.tensors)
    for (float v : t.data) io_detail::put_le<float>(os, v);
  std::string bytes = os.str();
  std::ostringstream tail(std::ios::binary);
  io_detail::put_le<std::uint64_t>(tail, fnv1a64(bytes));
  return bytes + tail.str();
}

inline CheckpointRecord decode_checkpoint(const std::string& bytes, const std::string& what) {
  if (bytes.size() < 4 + 4 + 8 + 8) throw IntegrityError(what + ": truncated checkpoint");
  const std::string body = bytes.substr(0, bytes.size() - 8);
  std::istringstream tail(bytes.substr(bytes.size() - 8), std::ios::binary);
  if (io_detail::get_le<std::uint64_t>(tail) != fnv1a64(body)) throw IntegrityError(what + ": checksum mismatch");
  std::istringstream is(body, std::ios::binary);
  char magic[4];
  is.read(magic, 4);
  if (std::string(magic, 4) != "MSCK") throw IntegrityError(what + ": not a checkpoint file");
  const auto version = io_detail::get_le<std::uint32_t>(is);
  if (version != kCheckpointVersion) throw IntegrityError(what + ": unsupported version " + std::to_string(version));
  const auto hlen = io_detail::get_le<std::uint64_t>(is);
  if (hlen > body.size()) throw IntegrityError(what + ": bad header length");
  std::string header(hlen, '\0');
  is.read(header.data(), std::streamsize(hlen));
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(what + ": bad header: " + e.what());
  }
  CheckpointRecord r;
  r.epoch = h.at("epoch").get<int>();
  r.validation_loss = h.at("validation_loss").get<double>();
  r.objective = h.at("objective").get<std::string>();
  r.spec = h.at("spec");
  for (const auto& t : h.at("tensors")) {
    NamedTensor nt{t.at("name").get<std::string>(), t.at("shape").get<ag::Shape>(), {}};
    nt.data.resize(ag::numel(nt.shape));
    for (auto& v : nt.data) v = io_detail::get_le<float>(is);
    if (!is) throw IntegrityError(what + ": truncated payload");
    r.tensors.push_back(std::move(nt));
  }
  if (is.peek() != std::char_traits<char>::eof()) throw IntegrityError(what + ": trailing bytes");
  return r;
}

inline void save_checkpoint_file(const std::filesystem::path& path, const CheckpointRecord& r) {
  const std::string bytes = encode_checkpoint(r);
  std::ofstream os(path, std::ios::binary);
  os.write(bytes.data(), std::streamsize(bytes.size()));
  if (!os) throw DataError("cannot write checkpoint " + path.string());
}

inline CheckpointRecord load_checkpoint_file(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw DependencyError("checkpoint not found: " + path.string());
  std::ifstream is(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes, path.string());
}

/// Ranking used by the store: lower validation loss first, ties to the earlier epoch.
inline bool better_checkpoint(double loss_a, int epoch_a, double loss_b, int epoch_b) {
  if (loss_a != loss_b) return loss_a < loss_b;
  return epoch_a < epoch_b;
}

struct CheckpointEntry {
  int epoch;
  double validation_loss;
};

/// checkpoints/NNN.ckpt plus index.json; at most k files survive.
class CheckpointStore {
 public:
  CheckpointStore(std::filesystem::path dir, int k) : dir_(std::move(dir)), k_(k) {
    if (k < 1) throw ConfigError("checkpoint_k must be >= 1");
    std::filesystem::create_directories(dir_);
    load_index();
  }

  static std::string file_name(int epoch) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%03d.ckpt", epoch);
    return buf;
  }

  /// Returns false when the record ranks below the current k survivors and is not written.
  bool save(const CheckpointRecord& r) {
    entries_.erase(std::remove_if(entries_.begin(), entries_.end(), [&](const auto& e) { return e.epoch == r.epoch; }),
                   entries_.end());
    entries_.push_back({r.epoch, r.validation_loss});
    sort();
    bool kept = true;
    while (int(entries_.size()) > k_) {
      const auto worst = entries_.back();
      entries_.pop_back();
      if (worst.epoch == r.epoch)
        kept = false;
      else
        std::filesystem::remove(dir_ / file_name(worst.epoch));
    }
    if (kept) save_checkpoint_file(dir_ / file_name(r.epoch), r);
    write_index();
    return kept;
  }

  CheckpointRecord load(int epoch) const {
    const bool known = std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.epoch == epoch; });
    if (!known) throw DependencyError("no checkpoint for epoch " + std::to_string(epoch) + " in " + dir_.string());
    return load_checkpoint_file(dir_ / file_name(epoch));
  }

  /// Survivors sorted by validation loss (ties: earlier epoch first).
  const std::vector<CheckpointEntry>& entries() const { return entries_; }
  const std::filesystem::path& dir() const { return dir_; }

 private:
  void sort() {
    std::stable_sort(entries_.begin(), entries_.end(), [](const auto& a, const auto& b) {
      return better_checkpoint(a.validation_loss, a.epoch, b.validation_loss, b.epoch);
    });
  }

  void write_index() const {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& e : entries_)
      j.push_back({{"epoch", e.epoch}, {"file", file_name(e.epoch)}, {"validation_loss", e.validation_loss}});
    std::ofstream os(dir_ / "index.json");
    os << j.dump(2) << '\n';
  }

  void load_index() {
    const auto p = dir_ / "index.json";
    if (!std::filesystem::exists(p)) return;
    std::ifstream is(p);
    nlohmann::json j;
    try {
      is >> j;
    } catch (const nlohmann::json::exception& e) {
      throw IntegrityError("checkpoint index " + p.string() + ": " + e.what());
    }
    for (const auto& e : j) entries_.push_back({e.at("epoch").get<int>(), e.at("validation_loss").get<double>()});
    sort();
  }

  std::filesystem::path dir_;
  int k_;
  std::vector<CheckpointEntry> entries_;
};

}  // namespace mscl
