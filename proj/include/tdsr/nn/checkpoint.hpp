#pragma once

// Named-parameter archive.
//
// Layout (all integers and floats little-endian):
//   "TDSRCKPT" | u32 version | u32 len, header text | u32 count |
//   count x (u32 len, name | i32 n, c, h, w | f64 values...) |
//   i64 optimizer step | u8 has_moments | [count x (f64 m..., f64 v...)]

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tdsr/errors.hpp"
#include "tdsr/nn/adam.hpp"

namespace tdsr::nn {

inline constexpr std::array<char, 8> kCheckpointMagic = {'T', 'D', 'S', 'R', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct ArchiveEntry {
  std::string name;
  Tensor<double> value;
  std::optional<Tensor<double>> m;
  std::optional<Tensor<double>> v;
};

struct Archive {
  std::string header;
  std::vector<ArchiveEntry> entries;
  long step = 0;

  const ArchiveEntry* find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }
};

namespace detail {

template <typename U>
U to_little(U v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(U)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<U>(bytes);
  } else {
    return v;
  }
}

class Writer {
 public:
  explicit Writer(const std::string& path) : path_(path), out_(path, std::ios::binary) {
    if (!out_) throw IoError(path, "cannot open for writing");
  }
  template <typename U>
  void put(U v) {
    v = to_little(v);
    out_.write(reinterpret_cast<const char*>(&v), sizeof(U));
  }
  void put_string(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void raw(const char* p, std::size_t n) { out_.write(p, static_cast<std::streamsize>(n)); }
  void finish() {
    out_.flush();
    if (!out_) throw IoError(path_, "write failed");
  }

 private:
  std::string path_;
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw IoError(path, "cannot open for reading");
  }
  template <typename U>
  U get() {
    U v{};
    in_.read(reinterpret_cast<char*>(&v), sizeof(U));
    if (!in_) throw IoError(path_, "truncated checkpoint");
    return to_little(v);
  }
  std::string get_string(std::size_t limit = 1u << 24) {
    const auto n = get<std::uint32_t>();
    if (n > limit) throw IoError(path_, "implausible string length");
    std::string s(n, '\0');
    in_.read(s.data(), n);
    if (!in_) throw IoError(path_, "truncated checkpoint");
    return s;
  }
  void raw(char* p, std::size_t n) {
    in_.read(p, static_cast<std::streamsize>(n));
    if (!in_) throw IoError(path_, "truncated checkpoint");
  }
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::ifstream in_;
};

template <typename T>
void put_values(Writer& w, const Tensor<T>& t) {
  for (std::size_t i = 0; i < t.size(); ++i) w.put<double>(static_cast<double>(t[i]));
}

inline Tensor<double> get_values(Reader& r, Shape4 s) {
  Tensor<double> t(s);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = r.get<double>();
  return t;
}

}  // namespace detail

/// Writes parameters (and Adam moments when the store has them).
template <typename T>
void save_archive(const std::string& path, const std::string& header,
                  std::span<Param<T>* const> params, const ParamStore<T>* optimizer = nullptr) {
  detail::Writer w(path);
  w.raw(kCheckpointMagic.data(), kCheckpointMagic.size());
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put_string(header);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(params.size()));
  for (const auto* p : params) {
    w.put_string(p->name);
    const Shape4 s = p->value.shape();
    for (int d : {s.n, s.c, s.h, s.w}) w.put<std::int32_t>(d);
    detail::put_values(w, p->value);
  }
  const bool moments = optimizer && optimizer->has_state() && optimizer->size() == params.size();
  w.put<std::int64_t>(optimizer ? optimizer->step() : 0);
  w.put<std::uint8_t>(moments ? 1 : 0);
  if (moments)
    for (const auto& st : optimizer->state()) {
      detail::put_values(w, st.m);
      detail::put_values(w, st.v);
    }
  w.finish();
}

inline Archive read_archive(const std::string& path) {
  detail::Reader r(path);
  std::array<char, 8> magic{};
  r.raw(magic.data(), magic.size());
  if (magic != kCheckpointMagic) throw IoError(path, "not a checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw IoError(path, "unsupported checkpoint version " + std::to_string(version));
  Archive a;
  a.header = r.get_string();
  const auto count = r.get<std::uint32_t>();
  a.entries.resize(count);
  for (auto& e : a.entries) {
    e.name = r.get_string(4096);
    Shape4 s;
    s.n = r.get<std::int32_t>();
    s.c = r.get<std::int32_t>();
    s.h = r.get<std::int32_t>();
    s.w = r.get<std::int32_t>();
    if (s.n < 0 || s.c < 0 || s.h < 0 || s.w < 0 || s.count() > (1u << 28))
      throw IoError(path, "implausible shape for '" + e.name + "'");
    e.value = detail::get_values(r, s);
  }
  a.step = static_cast<long>(r.get<std::int64_t>());
  if (r.get<std::uint8_t>() != 0)
    for (auto& e : a.entries) {
      e.m = detail::get_values(r, e.value.shape());
      e.v = detail::get_values(r, e.value.shape());
    }
  return a;
}

/// Copies archived values into matching parameters by name. Every
/// parameter must be present with the same shape.
template <typename T>
void load_archive(const Archive& a, std::span<Param<T>* const> params,
                  ParamStore<T>* optimizer = nullptr) {
  std::vector<typename ParamStore<T>::Moments> moments;
  bool have_moments = true;
  for (auto* p : params) {
    const ArchiveEntry* e = a.find(p->name);
    if (!e) throw IoError("<archive>", "missing parameter '" + p->name + "'");
    if (!(e->value.shape() == p->value.shape()))
      throw ShapeError("checkpoint parameter '" + p->name + "' has shape " +
                       e->value.shape().str() + ", model expects " + p->value.shape().str());
    p->value = e->value.template cast<T>();
    if (e->m && e->v)
      moments.push_back({e->m->template cast<T>(), e->v->template cast<T>()});
    else
      have_moments = false;
  }
  if (optimizer) optimizer->set_state(a.step, have_moments ? std::move(moments) : decltype(moments){});
}

}  // namespace tdsr::nn
