#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace bcm {

/// Error thrown on precondition violations and structural failures.
/// The message carries the diagnostic required by the operation contracts.
class Error : public std::runtime_error {
public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Numerical failure (diverged iteration, non-finite state).
class NumericsError : public Error {
public:
  using Error::Error;
};

/// Storage failure or corrupt/unreadable file.
class IoError : public Error {
public:
  using Error::Error;
};

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  double& operator[](int a) { return a == 0 ? x : (a == 1 ? y : z); }
  double operator[](int a) const { return a == 0 ? x : (a == 1 ? y : z); }

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  Vec3 operator/(double s) const { return {x / s, y / s, z / s}; }
  Vec3& operator+=(const Vec3& o) { x += o.x; y += o.y; z += o.z; return *this; }
  Vec3& operator-=(const Vec3& o) { x -= o.x; y -= o.y; z -= o.z; return *this; }
  bool operator==(const Vec3&) const = default;
};

inline Vec3 operator*(double s, const Vec3& v) { return v * s; }
inline double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
inline double norm(const Vec3& v) { return std::sqrt(dot(v, v)); }

/// Integer triple used for cell indices and lattice coordinates.
struct IVec3 {
  int64_t x = 0, y = 0, z = 0;
  int64_t& operator[](int a) { return a == 0 ? x : (a == 1 ? y : z); }
  int64_t operator[](int a) const { return a == 0 ? x : (a == 1 ? y : z); }
  IVec3 operator+(const IVec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  IVec3 operator-(const IVec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  bool operator==(const IVec3&) const = default;
};

/// Axis-aligned box, half-open in lattice space, closed arithmetic in physical space.
struct Box {
  Vec3 lo, hi;
  bool contains(const Vec3& p) const {
    return p.x >= lo.x && p.x < hi.x && p.y >= lo.y && p.y < hi.y && p.z >= lo.z && p.z < hi.z;
  }
  bool intersects(const Box& o) const {
    return lo.x < o.hi.x && o.lo.x < hi.x && lo.y < o.hi.y && o.lo.y < hi.y &&
           lo.z < o.hi.z && o.lo.z < hi.z;
  }
  Vec3 extent() const { return hi - lo; }
};

/// Face index convention used throughout: 0:-x 1:+x 2:-y 3:+y 4:-z 5:+z.
inline constexpr int kNumFaces = 6;
inline constexpr int face_axis(int f) { return f / 2; }
inline constexpr int face_side(int f) { return f % 2; }  // 0 = low, 1 = high
inline constexpr int opposite_face(int f) { return f ^ 1; }

/// FNV-1a 64-bit, used for file integrity and state checksums.
inline uint64_t fnv1a64(const void* data, size_t len, uint64_t seed = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const uint8_t*>(data);
  uint64_t h = seed;
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace bcm
