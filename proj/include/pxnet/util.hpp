#pragma once
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "pxnet/error.hpp"

namespace pxnet {

// ---------- big-endian packing ----------

inline void put_u8(std::string& out, uint8_t v) { out.push_back(char(v)); }

inline void put_u32be(std::string& out, uint32_t v) {
  out.push_back(char(v >> 24));
  out.push_back(char(v >> 16));
  out.push_back(char(v >> 8));
  out.push_back(char(v));
}

inline void put_u64be(std::string& out, uint64_t v) {
  put_u32be(out, uint32_t(v >> 32));
  put_u32be(out, uint32_t(v));
}

inline void put_f32be(std::string& out, float v) { put_u32be(out, std::bit_cast<uint32_t>(v)); }
inline void put_f64be(std::string& out, double v) { put_u64be(out, std::bit_cast<uint64_t>(v)); }

// bounds-checked big-endian reader; underruns raise TruncatedFile
struct ByteReader {
  const uint8_t* p = nullptr;
  size_t n = 0;
  size_t off = 0;

  explicit ByteReader(std::string_view s)
      : p(reinterpret_cast<const uint8_t*>(s.data())), n(s.size()) {}

  size_t remaining() const { return n - off; }

  void need(size_t k) const {
    if (off + k > n) raise(Err::TruncatedFile, "need " + std::to_string(k) + " bytes, have " + std::to_string(n - off));
  }
  uint8_t u8() {
    need(1);
    return p[off++];
  }
  uint32_t u32be() {
    need(4);
    uint32_t v = (uint32_t(p[off]) << 24) | (uint32_t(p[off + 1]) << 16) | (uint32_t(p[off + 2]) << 8) | uint32_t(p[off + 3]);
    off += 4;
    return v;
  }
  uint64_t u64be() {
    uint64_t hi = u32be();
    return (hi << 32) | u32be();
  }
  float f32be() { return std::bit_cast<float>(u32be()); }
  double f64be() { return std::bit_cast<double>(u64be()); }
  void bytes(void* dst, size_t k) {
    need(k);
    std::memcpy(dst, p + off, k);
    off += k;
  }
};

// ---------- deterministic RNG ----------

inline uint64_t splitmix64(uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// mt19937_64 core with hand-rolled distributions so that sequences are
// identical across standard libraries (std::*_distribution is not portable).
class Rng {
public:
  explicit Rng(uint64_t seed) : gen_(mix_seed(seed)) {}

  // independent sub-stream (e.g. one per epoch) derived from (seed, index)
  static Rng stream(uint64_t seed, uint64_t index) {
    uint64_t s = seed;
    (void)splitmix64(s);
    s ^= 0x632be59bd9b4e019ULL * (index + 1);
    return Rng(splitmix64(s));
  }

  uint64_t next_u64() { return gen_(); }

  double uniform01() {  // [0, 1)
    return double(next_u64() >> 11) * 0x1.0p-53;
  }
  double uniform(double a, double b) { return a + (b - a) * uniform01(); }
  uint32_t below(uint32_t n) {  // [0, n), n >= 1
    return uint32_t(uniform01() * double(n));
  }

  double gaussian() {  // Box-Muller, pair cached
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform01(), u2 = uniform01();
    double r = std::sqrt(-2.0 * std::log(1.0 - u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  uint32_t poisson(double lambda) {  // Knuth; fine for the small rates used here
    if (lambda <= 0) return 0;
    double limit = std::exp(-lambda);
    uint32_t k = 0;
    double prod = uniform01();
    while (prod > limit) {
      ++k;
      prod *= uniform01();
    }
    return k;
  }

private:
  static uint64_t mix_seed(uint64_t seed) {
    uint64_t s = seed ^ 0xd1b54a32d192ed03ULL;
    return splitmix64(s);
  }
  std::mt19937_64 gen_;
  bool have_spare_ = false;
  double spare_ = 0;
};

// ---------- robust statistics ----------

double median_inplace(std::vector<double>& v);  // exact; averages middle pair on even n
double median(std::vector<double> v);
double mad_sigma(const std::vector<double>& v);  // 1.4826 * median(|x - median|)

// ---------- base64 ----------

std::string base64_encode(std::string_view bytes);
std::string base64_decode(std::string_view text);  // strict; ProtocolViolation on bad input

// ---------- raw DEFLATE (RFC 1951) ----------

std::string deflate_raw(std::string_view data, int level = 9);
std::string inflate_raw(std::string_view data, size_t max_out = size_t(1) << 31);

// ---------- digests ----------

uint64_t fnv1a64(std::string_view s);
std::string hex64(uint64_t v);

}  // namespace pxnet
