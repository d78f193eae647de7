#include "ovseg/params.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

namespace ovseg {

void ParamSet::add(std::string name, Tensor t) {
  if (contains(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  entries_.emplace_back(std::move(name), std::move(t));
}

bool ParamSet::contains(std::string_view name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.first == name; });
}

const Tensor& ParamSet::get(std::string_view name) const {
  for (const auto& e : entries_) {
    if (e.first == name) return e.second;
  }
  throw ConfigError("missing parameter '" + std::string(name) + "'");
}

ParamSet ParamSet::with_prefix(std::string_view prefix) const {
  ParamSet out;
  for (const auto& [name, t] : entries_) {
    if (name.starts_with(prefix)) out.add(name, t);
  }
  return out;
}

void ParamSet::append(const ParamSet& other, std::string_view prefix) {
  for (const auto& [name, t] : other) add(std::string(prefix) + name, t);
}

std::vector<Tensor> ParamSet::tensors() const {
  std::vector<Tensor> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.second);
  return out;
}

namespace {

constexpr char kMagic[4] = {'O', 'V', 'W', '1'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  bool done() const { return pos_ == bytes_.size(); }
  std::size_t pos() const { return pos_; }

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) throw ParseError(std::string("OVW1: truncated ") + what, pos_);
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_ovw1(const ParamSet& params) {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  for (const auto& [name, t] : params) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : t.data()) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  return out;
}

ParamSet decode_ovw1(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  auto magic = r.take(4, "magic");
  if (std::memcmp(magic.data(), kMagic, 4) != 0) throw ParseError("OVW1: bad magic", 0);
  ParamSet out;
  while (!r.done()) {
    const std::size_t record_at = r.pos();
    const std::uint32_t len = r.u32("name length");
    auto name_bytes = r.take(len, "name");
    std::string name(name_bytes.begin(), name_bytes.end());
    const std::uint32_t rank = r.u32("rank");
    Shape shape(rank);
    for (auto& d : shape) d = r.u32("dimension");
    const std::size_t n = shape_numel(shape);
    std::vector<double> data(n);
    for (auto& v : data) {
      const float f = std::bit_cast<float>(r.u32("payload"));
      if (!std::isfinite(f)) throw ParseError("OVW1: non-finite value in '" + name + "'", r.pos() - 4);
      v = static_cast<double>(f);
    }
    if (out.contains(name)) throw ParseError("OVW1: duplicate record '" + name + "'", record_at);
    out.add(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  return out;
}

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open '" + path + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_bytes(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("write failed for '" + path + "'");
}

void save_ovw1(const std::string& path, const ParamSet& params) { write_file_bytes(path, encode_ovw1(params)); }

ParamSet load_ovw1(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  return decode_ovw1(bytes);
}

}  // namespace ovseg
