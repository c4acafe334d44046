// Copyright 2026 The MoEKD Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "moekd/error.hpp"
#include "moekd/nn.hpp"

namespace moekd {

// MOEKD1 container:
//   "MOEKD1" | u64 LE metadata length | metadata JSON | f64 LE parameters
// Parameters are the flat w1, b1, w2, b2 block of ClassifierParams.

inline constexpr std::string_view kCheckpointMagic = "MOEKD1";
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  ClassifierParams params;
  LossSpec loss;
  std::uint64_t seed = 0;
};

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_u64(std::string_view in, std::size_t off) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[off + i])) << (8 * i);
  return v;
}

}  // namespace detail

inline std::string checkpoint_metadata(const Checkpoint& ck) {
  const auto& a = ck.params.arch();
  nlohmann::ordered_json meta{
      {"arch", {{"input_dim", a.input_dim}, {"hidden", a.hidden}, {"classes", a.classes}}},
      {"loss", to_json(ck.loss)},
      {"seed", ck.seed},
      {"version", kCheckpointVersion}};
  return meta.dump();
}

inline std::string encode_checkpoint(const Checkpoint& ck) {
  const auto meta = checkpoint_metadata(ck);
  std::string out(kCheckpointMagic);
  detail::put_u64(out, meta.size());
  out += meta;
  for (const double v : ck.params.values()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

inline Checkpoint decode_checkpoint(std::string_view bytes) {
  if (bytes.substr(0, kCheckpointMagic.size()) != kCheckpointMagic) {
    throw FormatError("not a MOEKD1 checkpoint (bad magic)");
  }
  std::size_t off = kCheckpointMagic.size();
  if (bytes.size() < off + 8) throw FormatError("truncated checkpoint header");
  const auto meta_len = detail::get_u64(bytes, off);
  off += 8;
  if (meta_len > bytes.size() - off) throw FormatError("truncated checkpoint metadata");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(bytes.substr(off, meta_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad checkpoint metadata: ") + e.what());
  }
  off += meta_len;
  if (meta.value("version", 0) != kCheckpointVersion) throw FormatError("unsupported checkpoint version");

  Architecture arch;
  arch.input_dim = meta.at("arch").at("input_dim").get<std::size_t>();
  arch.hidden = meta.at("arch").at("hidden").get<std::size_t>();
  arch.classes = meta.at("arch").at("classes").get<std::size_t>();
  Checkpoint ck{ClassifierParams(arch), loss_spec_from_json(meta.at("loss")), meta.at("seed").get<std::uint64_t>()};
  auto values = ck.params.values();
  if (bytes.size() - off != values.size() * 8) {
    throw FormatError("checkpoint holds " + std::to_string((bytes.size() - off) / 8) +
                      " parameters, architecture needs " + std::to_string(values.size()));
  }
  for (std::size_t k = 0; k < values.size(); ++k, off += 8) {
    values[k] = std::bit_cast<double>(detail::get_u64(bytes, off));
  }
  if (!ck.params.all_finite()) throw FormatError("checkpoint contains non-finite parameters");
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write checkpoint " + path.string());
  const auto bytes = encode_checkpoint(ck);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace moekd
