#include "bcm/wavelet.hpp"

#include <cstring>
#include <type_traits>

#include <zlib.h>

namespace bcm {

namespace {

// floor((a + b) / 2) without overflow.
int64_t avg_floor(int64_t a, int64_t b) { return (a >> 1) + (b >> 1) + (a & b & 1); }

// floor((a + b + 2) / 4) via 128-bit intermediate.
int64_t update_floor(int64_t a, int64_t b) {
  __int128 s = static_cast<__int128>(a) + b + 2;
  __int128 q = s >> 2;  // arithmetic shift == floor division by 4
  return static_cast<int64_t>(q);
}

// Wrapping add/sub: reinterpreted double bit patterns can sit anywhere in
// the int64 range, and two's-complement wrap keeps the lifting reversible.
template <class T>
T wadd(T a, T b) {
  if constexpr (std::is_integral_v<T>)
    return static_cast<T>(static_cast<uint64_t>(a) + static_cast<uint64_t>(b));
  else
    return a + b;
}
template <class T>
T wsub(T a, T b) {
  if constexpr (std::is_integral_v<T>)
    return static_cast<T>(static_cast<uint64_t>(a) - static_cast<uint64_t>(b));
  else
    return a - b;
}

template <class T, class Predict, class Update>
void lift_line(T* x, int stride, int len, std::vector<T>& tmp, Predict&& predict,
               Update&& update) {
  const int m = len / 2;
  tmp.resize(len);
  // d_i = x[2i+1] - predict(x[2i], x[2i+2]); symmetric extension x[len] = x[len-2]
  for (int i = 0; i < m; ++i) {
    const T even_l = x[2 * i * stride];
    const T even_r = (2 * i + 2 < len) ? x[(2 * i + 2) * stride] : x[(len - 2) * stride];
    tmp[m + i] = wsub(x[(2 * i + 1) * stride], predict(even_l, even_r));
  }
  // s_i = x[2i] + update(d_{i-1}, d_i); extension d_{-1} = d_0
  for (int i = 0; i < m; ++i) {
    const T dl = (i > 0) ? tmp[m + i - 1] : tmp[m];
    tmp[i] = wadd(x[2 * i * stride], update(dl, tmp[m + i]));
  }
  for (int i = 0; i < len; ++i) x[i * stride] = tmp[i];
}

template <class T, class Predict, class Update>
void unlift_line(T* x, int stride, int len, std::vector<T>& tmp, Predict&& predict,
                 Update&& update) {
  const int m = len / 2;
  tmp.resize(len);
  // evens: x[2i] = s_i - update(d_{i-1}, d_i)
  for (int i = 0; i < m; ++i) {
    const T dl = (i > 0) ? x[(m + i - 1) * stride] : x[m * stride];
    tmp[2 * i] = wsub(x[i * stride], update(dl, x[(m + i) * stride]));
  }
  // odds: x[2i+1] = d_i + predict(x[2i], x[2i+2])
  for (int i = 0; i < m; ++i) {
    const T even_l = tmp[2 * i];
    const T even_r = (2 * i + 2 < len) ? tmp[2 * i + 2] : tmp[len - 2];
    tmp[2 * i + 1] = wadd(x[(m + i) * stride], predict(even_l, even_r));
  }
  for (int i = 0; i < len; ++i) x[i * stride] = tmp[i];
}

template <class T, class Predict, class Update>
void transform3(std::span<T> block, int ext, bool forward, Predict&& predict, Update&& update) {
  std::vector<T> tmp;
  const int e2 = ext * ext;
  auto pass = [&](int axis) {
    const int stride = axis == 0 ? e2 : (axis == 1 ? ext : 1);
    for (int a = 0; a < ext; ++a)
      for (int b = 0; b < ext; ++b) {
        int64_t base;
        if (axis == 0) base = a * ext + b;           // vary i
        else if (axis == 1) base = a * e2 + b;       // vary j
        else base = a * e2 + b * ext;                // vary k
        if (forward)
          lift_line(block.data() + base, stride, ext, tmp, predict, update);
        else
          unlift_line(block.data() + base, stride, ext, tmp, predict, update);
      }
  };
  if (forward) {
    pass(0);
    pass(1);
    pass(2);
  } else {
    pass(2);
    pass(1);
    pass(0);
  }
}

double predict_d(double a, double b) { return 0.5 * (a + b); }
double update_d(double a, double b) { return 0.25 * (a + b); }

}  // namespace

void dwt53_forward(std::span<double> block, int ext) {
  transform3(block, ext, true, predict_d, update_d);
}
void dwt53_inverse(std::span<double> block, int ext) {
  transform3(block, ext, false, predict_d, update_d);
}
void dwt53_forward_i64(std::span<int64_t> block, int ext) {
  transform3(block, ext, true, avg_floor, update_floor);
}
void dwt53_inverse_i64(std::span<int64_t> block, int ext) {
  transform3(block, ext, false, avg_floor, update_floor);
}

std::vector<uint8_t> deflate_bytes(std::span<const uint8_t> raw, int level) {
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<uint8_t> out(bound);
  if (compress2(out.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), level) != Z_OK)
    throw Error("deflate failed");
  out.resize(bound);
  return out;
}

std::vector<uint8_t> inflate_bytes(std::span<const uint8_t> compressed, size_t raw_size) {
  std::vector<uint8_t> out(raw_size);
  uLongf len = static_cast<uLongf>(raw_size);
  const int rc = uncompress(out.data(), &len, compressed.data(),
                            static_cast<uLong>(compressed.size()));
  if (rc != Z_OK || len != raw_size) throw Error("inflate failed: corrupt stream");
  return out;
}

}  // namespace bcm
