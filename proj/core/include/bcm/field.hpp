#pragma once

#include <span>
#include <vector>

#include "bcm/decomp.hpp"
#include "bcm/mesh.hpp"
#include "bcm/types.hpp"

namespace bcm {

enum class Quantity : uint8_t { velocity, pressure, force, scratch };

/// Per-cube cell-centered storage for one physical quantity: each locally
/// owned cube holds a dense (n + 2h)^3 x n_components array, halo included.
/// Layout is identical for every cube; component-major, k fastest.
class Field {
public:
  Field() = default;
  Field(Quantity q, int n_components, int n_cells, int halo_width, int n_local_cubes);

  Quantity quantity() const { return quantity_; }
  int components() const { return ncomp_; }
  int n() const { return n_; }
  int halo() const { return h_; }
  int ext() const { return n_ + 2 * h_; }          // cells per edge incl. halo
  int64_t cells_per_comp() const { return static_cast<int64_t>(ext()) * ext() * ext(); }
  int local_cubes() const { return static_cast<int>(data_.size()); }

  /// Cell (i,j,k) of component c on local cube lc; indices in [-h, n+h).
  double& at(int lc, int c, int i, int j, int k) {
    return data_[lc][index(c, i, j, k)];
  }
  double at(int lc, int c, int i, int j, int k) const {
    return data_[lc][index(c, i, j, k)];
  }

  std::span<double> cube_span(int lc) { return data_[lc]; }
  std::span<const double> cube_span(int lc) const { return data_[lc]; }
  std::vector<double>& cube_data(int lc) { return data_[lc]; }

  void fill(double v);
  void fill_cube(int lc, double v);
  void zero_halos();

  /// Exchange epoch guard: a field must not start a new exchange while one
  /// is pending. Maintained by the halo module.
  uint32_t exchange_epoch = 0;
  bool exchange_pending = false;

  int64_t index(int c, int i, int j, int k) const {
    const int64_t e = ext();
    return ((static_cast<int64_t>(c) * e + (i + h_)) * e + (j + h_)) * e + (k + h_);
  }

private:
  Quantity quantity_ = Quantity::scratch;
  int ncomp_ = 1;
  int n_ = 0;
  int h_ = 2;
  std::vector<std::vector<double>> data_;
};

}  // namespace bcm
