// Copyright 2026 The adafuse Authors
// SPDX-License-Identifier: Apache-2.0

#include "adafuse/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "adafuse/error.hpp"

namespace adafuse {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[4] = {'A', 'D', 'P', 'T'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const std::string& in, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

void put_f64(std::string& out, double x) {
  const auto bits = std::bit_cast<std::uint64_t>(x);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

double get_f64(const char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace

const ad::Tensor& Container::tensor(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name() == name) return t;
  }
  throw FormatError("checkpoint has no tensor '" + name + "'");
}

bool Container::has_tensor(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name() == name) return true;
  }
  return false;
}

std::vector<ad::Tensor> copy_tensors(const ad::ParamSet& params) {
  std::vector<ad::Tensor> out;
  for (const auto& t : params) out.push_back(t.detach());
  return out;
}

void write_container(const fs::path& path, const Container& c) {
  Json header = c.extra.is_object() ? c.extra : Json::object();
  header["config"] = c.config;
  header["fingerprint"] = c.fingerprint;
  header["metadata"] = c.metadata;
  Json entries = Json::array();
  std::uint64_t offset = 0;
  for (const auto& t : c.tensors) {
    const std::uint64_t len = t.numel() * 8;
    entries.push_back({{"name", t.name()}, {"shape", t.shape()}, {"dtype", "f64"},
                       {"offset", offset}, {"byte_len", len}});
    offset += len;
  }
  header["tensors"] = entries;
  const std::string text = header.dump();

  std::string bytes(kMagic, 4);
  put_u32(bytes, kContainerVersion);
  put_u32(bytes, static_cast<std::uint32_t>(text.size()));
  bytes += text;
  bytes.reserve(bytes.size() + offset);
  for (const auto& t : c.tensors)
    for (double x : t.data()) put_f64(bytes, x);

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

Container read_container(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string where = path.string() + ": ";
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError(where + "not a tensor container (bad magic)");
  }
  const std::uint32_t version = get_u32(bytes, 4);
  if (version != kContainerVersion) {
    throw FormatError(where + "unsupported container version " + std::to_string(version));
  }
  const std::size_t hlen = get_u32(bytes, 8);
  if (12 + hlen > bytes.size()) throw FormatError(where + "truncated header");

  Json header;
  try {
    header = Json::parse(bytes.begin() + 12, bytes.begin() + 12 + static_cast<std::ptrdiff_t>(hlen));
  } catch (const Json::parse_error& e) {
    throw FormatError(where + "malformed header: " + e.what());
  }
  Container c;
  try {
    if (!header.is_object()) throw FormatError("header is not an object");
    for (const char* key : {"config", "fingerprint", "metadata", "tensors"}) {
      if (!header.contains(key)) throw FormatError(std::string("header lacks '") + key + "'");
    }
    c.config = header.at("config");
    c.fingerprint = header.at("fingerprint").get<std::string>();
    c.metadata = header.at("metadata");
    const std::size_t payload = 12 + hlen;
    std::uint64_t expect_offset = 0;
    for (const auto& e : header.at("tensors")) {
      if (e.at("dtype").get<std::string>() != "f64") throw FormatError("unsupported dtype");
      const auto name = e.at("name").get<std::string>();
      const auto shape = e.at("shape").get<ad::Shape>();
      const auto offset = e.at("offset").get<std::uint64_t>();
      const auto len = e.at("byte_len").get<std::uint64_t>();
      if (offset != expect_offset) throw FormatError("tensor '" + name + "' offset out of order");
      if (len != ad::shape_numel(shape) * 8) {
        throw FormatError("tensor '" + name + "' byte_len does not match its shape");
      }
      if (payload + offset + len > bytes.size()) throw FormatError("truncated payload");
      std::vector<double> values(len / 8);
      const char* p = bytes.data() + payload + offset;
      for (std::size_t i = 0; i < values.size(); ++i) values[i] = get_f64(p + 8 * i);
      c.tensors.push_back(ad::Tensor::from(shape, std::move(values), name));
      expect_offset += len;
    }
    if (payload + expect_offset != bytes.size()) throw FormatError("trailing bytes after payload");
    for (const auto& [key, value] : header.items()) {
      if (key != "config" && key != "fingerprint" && key != "metadata" && key != "tensors") {
        c.extra[key] = value;
      }
    }
  } catch (const FormatError& e) {
    throw FormatError(where + e.what());
  } catch (const Json::exception& e) {
    throw FormatError(where + "malformed header: " + e.what());
  } catch (const DimensionError& e) {
    throw FormatError(where + e.what());
  }
  return c;
}

}  // namespace adafuse
