#include "pxnet/util.hpp"

#include <algorithm>
#include <zlib.h>

namespace pxnet {

double median_inplace(std::vector<double>& v) {
  require(!v.empty(), Err::PreconditionViolation, "median of empty set");
  size_t n = v.size();
  size_t mid = n / 2;
  std::nth_element(v.begin(), v.begin() + mid, v.end());
  double hi = v[mid];
  if (n % 2 == 1) return hi;
  double lo = *std::max_element(v.begin(), v.begin() + mid);
  return 0.5 * (lo + hi);
}

double median(std::vector<double> v) { return median_inplace(v); }

double mad_sigma(const std::vector<double>& v) {
  double med = median(v);
  std::vector<double> dev(v.size());
  for (size_t i = 0; i < v.size(); ++i) dev[i] = std::fabs(v[i] - med);
  return 1.4826 * median_inplace(dev);
}

// ---------- base64 ----------

static const char kB64[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

std::string base64_encode(std::string_view bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  size_t i = 0;
  const auto* p = reinterpret_cast<const uint8_t*>(bytes.data());
  for (; i + 3 <= bytes.size(); i += 3) {
    uint32_t v = (uint32_t(p[i]) << 16) | (uint32_t(p[i + 1]) << 8) | p[i + 2];
    out.push_back(kB64[(v >> 18) & 63]);
    out.push_back(kB64[(v >> 12) & 63]);
    out.push_back(kB64[(v >> 6) & 63]);
    out.push_back(kB64[v & 63]);
  }
  size_t rem = bytes.size() - i;
  if (rem == 1) {
    uint32_t v = uint32_t(p[i]) << 16;
    out.push_back(kB64[(v >> 18) & 63]);
    out.push_back(kB64[(v >> 12) & 63]);
    out.push_back('=');
    out.push_back('=');
  } else if (rem == 2) {
    uint32_t v = (uint32_t(p[i]) << 16) | (uint32_t(p[i + 1]) << 8);
    out.push_back(kB64[(v >> 18) & 63]);
    out.push_back(kB64[(v >> 12) & 63]);
    out.push_back(kB64[(v >> 6) & 63]);
    out.push_back('=');
  }
  return out;
}

std::string base64_decode(std::string_view text) {
  static int8_t rev[256];
  static bool init = [] {
    for (int i = 0; i < 256; ++i) rev[i] = -1;
    for (int i = 0; i < 64; ++i) rev[uint8_t(kB64[i])] = int8_t(i);
    return true;
  }();
  (void)init;
  require(text.size() % 4 == 0, Err::ProtocolViolation, "base64 length not a multiple of 4");
  std::string out;
  out.reserve(text.size() / 4 * 3);
  for (size_t i = 0; i < text.size(); i += 4) {
    int pad = 0;
    uint32_t v = 0;
    for (int k = 0; k < 4; ++k) {
      char c = text[i + k];
      if (c == '=') {
        require(i + 4 == text.size() && k >= 2, Err::ProtocolViolation, "base64 padding misplaced");
        ++pad;
        v <<= 6;
      } else {
        require(pad == 0, Err::ProtocolViolation, "base64 data after padding");
        int8_t d = rev[uint8_t(c)];
        require(d >= 0, Err::ProtocolViolation, "base64 bad character");
        v = (v << 6) | uint32_t(d);
      }
    }
    out.push_back(char(v >> 16));
    if (pad < 2) out.push_back(char(v >> 8));
    if (pad < 1) out.push_back(char(v));
  }
  return out;
}

// ---------- raw DEFLATE ----------

std::string deflate_raw(std::string_view data, int level) {
  z_stream zs{};
  require(deflateInit2(&zs, level, Z_DEFLATED, -15, 8, Z_DEFAULT_STRATEGY) == Z_OK,
          Err::IoFailure, "deflateInit2 failed");
  std::string out;
  out.resize(deflateBound(&zs, uLong(data.size())));
  zs.next_in = reinterpret_cast<Bytef*>(const_cast<char*>(data.data()));
  zs.avail_in = uInt(data.size());
  zs.next_out = reinterpret_cast<Bytef*>(out.data());
  zs.avail_out = uInt(out.size());
  int rc = deflate(&zs, Z_FINISH);
  deflateEnd(&zs);
  require(rc == Z_STREAM_END, Err::IoFailure, "deflate did not finish");
  out.resize(out.size() - zs.avail_out);
  return out;
}

std::string inflate_raw(std::string_view data, size_t max_out) {
  z_stream zs{};
  require(inflateInit2(&zs, -15) == Z_OK, Err::IoFailure, "inflateInit2 failed");
  std::string out;
  out.resize(std::min<size_t>(std::max<size_t>(data.size() * 4, 4096), max_out));
  zs.next_in = reinterpret_cast<Bytef*>(const_cast<char*>(data.data()));
  zs.avail_in = uInt(data.size());
  size_t written = 0;
  int rc = Z_OK;
  while (true) {
    zs.next_out = reinterpret_cast<Bytef*>(out.data() + written);
    zs.avail_out = uInt(out.size() - written);
    rc = inflate(&zs, Z_NO_FLUSH);
    written = out.size() - zs.avail_out;
    if (rc == Z_STREAM_END) break;
    if (rc != Z_OK && rc != Z_BUF_ERROR) {
      inflateEnd(&zs);
      raise(Err::IoFailure, "inflate failed: corrupt stream");
    }
    if (written == out.size()) {
      if (out.size() >= max_out) {
        inflateEnd(&zs);
        raise(Err::IoFailure, "inflate output exceeds limit");
      }
      out.resize(std::min(out.size() * 2, max_out));
    } else if (zs.avail_in == 0 && rc != Z_STREAM_END) {
      inflateEnd(&zs);
      raise(Err::IoFailure, "inflate: truncated stream");
    }
  }
  inflateEnd(&zs);
  out.resize(written);
  return out;
}

// ---------- digests ----------

uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(uint64_t v) {
  static const char* d = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[size_t(i)] = d[v & 15];
    v >>= 4;
  }
  return out;
}

}  // namespace pxnet
