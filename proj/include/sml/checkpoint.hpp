#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <map>
#include <stdexcept>
#include <string>

#include "sml/param_store.hpp"
#include "sml/tensor.hpp"

namespace sml::diff {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format stores 64-bit values little-endian");

// Fixed-width binary writer/reader for the checkpoint format.
class BinWriter {
 public:
  void u32(std::uint32_t v) { raw(&v, sizeof v); }
  void u64(std::uint64_t v) { raw(&v, sizeof v); }
  void f64(double v) { raw(&v, sizeof v); }
  void f64_span(std::span<const double> vs) { raw(vs.data(), vs.size() * sizeof(double)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  void text(const std::string& s) { bytes_ += s; }
  const std::string& bytes() const { return bytes_; }
  std::string take() { return std::move(bytes_); }

 private:
  void raw(const void* p, std::size_t n) {
    bytes_.append(static_cast<const char*>(p), n);
  }
  std::string bytes_;
};

class BinReader {
 public:
  explicit BinReader(const std::string& bytes) : bytes_(bytes) {}

  std::uint32_t u32() { return fixed<std::uint32_t>(); }
  std::uint64_t u64() { return fixed<std::uint64_t>(); }
  double f64() { return fixed<double>(); }
  void f64_span(std::span<double> out) {
    need(out.size() * sizeof(double));
    std::memcpy(out.data(), bytes_.data() + pos_, out.size() * sizeof(double));
    pos_ += out.size() * sizeof(double);
  }
  std::string str() {
    const std::uint32_t n = u32();
    return raw(n);
  }
  std::string raw(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string line() {
    auto nl = bytes_.find('\n', pos_);
    if (nl == std::string::npos) throw std::runtime_error("truncated checkpoint: missing header");
    std::string s = bytes_.substr(pos_, nl - pos_);
    pos_ = nl + 1;
    return s;
  }
  bool eof() const { return pos_ >= bytes_.size(); }

 private:
  template <typename T>
  T fixed() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  void need(std::size_t n) {
    if (pos_ + n > bytes_.size()) throw std::runtime_error("truncated checkpoint");
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

inline constexpr const char* kCheckpointHeader = "SMLCKPT v1";

// A checkpoint is the parameter table plus named opaque sections (the trainer
// stores optimizer moments and rng state in one, the model config in
// another). Serialization is deterministic, so save -> load -> save is
// byte-identical.
struct Checkpoint {
  ParamStore params;
  std::map<std::string, std::string> sections;
};

inline std::string serialize_checkpoint(const ParamStore& params,
                                        const std::map<std::string, std::string>& sections) {
  BinWriter w;
  w.text(std::string(kCheckpointHeader) + "\n");
  w.u64(static_cast<std::uint64_t>(params.count()));
  for (int i = 0; i < params.count(); ++i) {
    const Tensor& t = params.at(i);
    w.str(params.name(i));
    w.u32(static_cast<std::uint32_t>(t.ndim()));
    for (long d : t.shape()) w.u64(static_cast<std::uint64_t>(d));
    w.f64_span(t.values());
  }
  for (const auto& [tag, payload] : sections) {
    w.str(tag);
    w.u64(payload.size());
    w.text(payload);
  }
  return w.take();
}

inline std::string serialize_checkpoint(const Checkpoint& ckpt) {
  return serialize_checkpoint(ckpt.params, ckpt.sections);
}

inline Checkpoint parse_checkpoint(const std::string& bytes) {
  BinReader r(bytes);
  const std::string header = r.line();
  if (header != kCheckpointHeader)
    throw std::runtime_error("checkpoint version mismatch: got '" + header + "', want '" +
                             std::string(kCheckpointHeader) + "'");
  Checkpoint ckpt;
  const std::uint64_t n_params = r.u64();
  for (std::uint64_t i = 0; i < n_params; ++i) {
    std::string name = r.str();
    const std::uint32_t ndim = r.u32();
    std::vector<long> shape(ndim);
    for (auto& d : shape) d = static_cast<long>(r.u64());
    Tensor t(shape);
    r.f64_span(t.values());
    ckpt.params.add(name, std::move(t));
  }
  while (!r.eof()) {
    std::string tag = r.str();
    const std::uint64_t len = r.u64();
    ckpt.sections[tag] = r.raw(len);
  }
  return ckpt;
}

}  // namespace sml::diff
