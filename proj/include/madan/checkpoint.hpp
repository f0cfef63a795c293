#pragma once

// Single-file tensor archive: magic, u64 header length, JSON header
// (metadata + tensor index + SHA-1 of the payload), then raw float32
// payload in index order.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <openssl/evp.h>
#include <torch/torch.h>

#include "json.hpp"

#include "madan/error.hpp"

namespace madan {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr char kCheckpointMagic[8] = {'M', 'A', 'D', 'A', 'N', 'C', 'K', '1'};

inline std::string sha1_hex(const void* data, std::size_t n) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr);
  EVP_DigestUpdate(ctx, data, n);
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

inline std::string sha1_hex(const std::string& s) { return sha1_hex(s.data(), s.size()); }

struct TensorArchive {
  json metadata = json::object();
  std::vector<std::pair<std::string, torch::Tensor>> tensors;  // float32, contiguous on save

  const torch::Tensor* find(const std::string& name) const {
    for (const auto& [k, v] : tensors)
      if (k == name) return &v;
    return nullptr;
  }
};

inline void write_archive(const fs::path& path, const TensorArchive& a) {
  std::string payload;
  json index = json::array();
  for (const auto& [name, t] : a.tensors) {
    const auto c = t.detach().to(torch::kFloat32).contiguous();
    const auto bytes = static_cast<std::size_t>(c.numel()) * sizeof(float);
    index.push_back({{"name", name}, {"shape", c.sizes().vec()}, {"offset", payload.size()}, {"bytes", bytes}});
    payload.append(reinterpret_cast<const char*>(c.data_ptr<float>()), bytes);
  }
  const json header{{"format", 1}, {"metadata", a.metadata}, {"tensors", index}, {"payload_sha1", sha1_hex(payload)}};
  const std::string h = header.dump();
  const std::uint64_t hlen = h.size();

  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorKind::io, "cannot write checkpoint " + tmp.string());
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    require(static_cast<bool>(out), ErrorKind::io, "short write on checkpoint " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  require(!ec, ErrorKind::io, "cannot move checkpoint into place: " + ec.message());
}

inline TensorArchive read_archive(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::checkpoint, "cannot open checkpoint " + path.string());
  char magic[8];
  std::uint64_t hlen = 0;
  in.read(magic, sizeof(magic));
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  require(in && std::memcmp(magic, kCheckpointMagic, sizeof(magic)) == 0 && hlen < (1ull << 32),
          ErrorKind::checkpoint, path.string() + " is not a checkpoint");
  std::string h(hlen, '\0');
  in.read(h.data(), static_cast<std::streamsize>(hlen));
  const std::string payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  json header;
  try {
    header = json::parse(h);
  } catch (const json::exception& e) {
    fail(ErrorKind::checkpoint, std::string("corrupt checkpoint header: ") + e.what());
  }
  require(header.value("payload_sha1", "") == sha1_hex(payload), ErrorKind::checkpoint,
          "checkpoint payload hash mismatch in " + path.string());
  TensorArchive a;
  a.metadata = header.at("metadata");
  for (const auto& e : header.at("tensors")) {
    const auto shape = e.at("shape").get<std::vector<std::int64_t>>();
    const auto off = e.at("offset").get<std::size_t>();
    const auto bytes = e.at("bytes").get<std::size_t>();
    require(off + bytes <= payload.size(), ErrorKind::checkpoint, "checkpoint tensor out of bounds");
    auto t = torch::empty(shape, torch::kFloat32);
    require(static_cast<std::size_t>(t.numel()) * sizeof(float) == bytes, ErrorKind::checkpoint,
            "checkpoint tensor size mismatch");
    std::memcpy(t.data_ptr<float>(), payload.data() + off, bytes);
    a.tensors.emplace_back(e.at("name").get<std::string>(), std::move(t));
  }
  return a;
}

/// Every parameter and buffer of `m` under `prefix.`.
inline void append_module(TensorArchive& a, const std::string& prefix, const torch::nn::Module& m) {
  for (const auto& p : m.named_parameters(true)) a.tensors.emplace_back(prefix + "." + p.key(), p.value());
  for (const auto& b : m.named_buffers(true)) a.tensors.emplace_back(prefix + "." + b.key(), b.value());
}

/// Copies archive tensors into `m`; any missing name or shape difference is a checkpoint error.
inline void restore_module(const TensorArchive& a, const std::string& prefix, torch::nn::Module& m) {
  torch::NoGradGuard guard;
  auto copy = [&](const std::string& key, torch::Tensor& dst) {
    const auto* src = a.find(prefix + "." + key);
    require(src != nullptr, ErrorKind::checkpoint, "checkpoint lacks tensor '" + prefix + "." + key + "'");
    require(src->sizes() == dst.sizes(), ErrorKind::checkpoint, "checkpoint tensor '" + prefix + "." + key +
                                                                    "' has a different shape than the configured model");
    dst.copy_(*src);
  };
  for (auto& p : m.named_parameters(true)) copy(p.key(), p.value());
  for (auto& b : m.named_buffers(true)) copy(b.key(), b.value());
}

}  // namespace madan
