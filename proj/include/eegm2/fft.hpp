#pragma once

#include <complex>
#include <cstdint>
#include <vector>

namespace eegm2::fft {

/// In-place complex DFT (forward sign convention exp(-2*pi*i*k*n/N)).
/// Radix-2 for power-of-two sizes, Bluestein chirp-z otherwise.
void dft_inplace(std::vector<std::complex<double>>& x, bool inverse = false);

/// Real-input DFT over the non-negative frequency bins 0..floor(n/2),
/// unnormalized. Returns interleaved (re, im) pairs of length 2*(n/2+1).
std::vector<double> rfft(const double* x, int64_t n);

}  // namespace eegm2::fft
