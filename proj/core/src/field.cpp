#include "bcm/field.hpp"

#include <algorithm>

namespace bcm {

Field::Field(Quantity q, int n_components, int n_cells, int halo_width, int n_local_cubes)
    : quantity_(q), ncomp_(n_components), n_(n_cells), h_(halo_width) {
  if (halo_width < 2) throw Error("Field: halo width must cover the widest stencil (>= 2)");
  if (n_cells < 2) throw Error("Field: need at least 2 cells per edge");
  data_.assign(n_local_cubes, std::vector<double>(cells_per_comp() * ncomp_, 0.0));
}

void Field::fill(double v) {
  for (auto& cube : data_) std::fill(cube.begin(), cube.end(), v);
}

void Field::fill_cube(int lc, double v) {
  std::fill(data_[lc].begin(), data_[lc].end(), v);
}

void Field::zero_halos() {
  for (int lc = 0; lc < local_cubes(); ++lc)
    for (int c = 0; c < ncomp_; ++c)
      for (int i = -h_; i < n_ + h_; ++i)
        for (int j = -h_; j < n_ + h_; ++j)
          for (int k = -h_; k < n_ + h_; ++k)
            if (i < 0 || i >= n_ || j < 0 || j >= n_ || k < 0 || k >= n_)
              at(lc, c, i, j, k) = 0.0;
}

}  // namespace bcm
