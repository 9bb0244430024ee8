#include "eegm2/fft.hpp"

#include <cmath>

namespace eegm2::fft {

namespace {

constexpr double kTau = 6.283185307179586476925286766559;

bool is_pow2(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

void fft_pow2(std::vector<std::complex<double>>& a, bool inverse) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    double ang = kTau / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
    std::complex<double> wl(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t j = 0; j < len / 2; ++j) {
        std::complex<double> u = a[i + j];
        std::complex<double> v = a[i + j + len / 2] * w;
        a[i + j] = u + v;
        a[i + j + len / 2] = u - v;
        w *= wl;
      }
    }
  }
  if (inverse) {
    for (auto& v : a) v /= static_cast<double>(n);
  }
}

// Bluestein chirp-z: expresses an arbitrary-size DFT as a circular
// convolution of power-of-two size >= 2n-1.
void fft_bluestein(std::vector<std::complex<double>>& a, bool inverse) {
  const std::size_t n = a.size();
  std::size_t m = 1;
  while (m < 2 * n - 1) m <<= 1;

  std::vector<std::complex<double>> chirp(n);
  for (std::size_t k = 0; k < n; ++k) {
    // k^2 mod 2n keeps the phase argument small.
    uint64_t k2 = (static_cast<uint64_t>(k) * k) % (2 * n);
    double ang = kTau * static_cast<double>(k2) / (2.0 * static_cast<double>(n));
    if (!inverse) ang = -ang;
    chirp[k] = {std::cos(ang), std::sin(ang)};
  }

  std::vector<std::complex<double>> u(m, {0.0, 0.0});
  std::vector<std::complex<double>> v(m, {0.0, 0.0});
  for (std::size_t k = 0; k < n; ++k) u[k] = a[k] * chirp[k];
  v[0] = std::conj(chirp[0]);
  for (std::size_t k = 1; k < n; ++k) {
    v[k] = std::conj(chirp[k]);
    v[m - k] = std::conj(chirp[k]);
  }

  fft_pow2(u, false);
  fft_pow2(v, false);
  for (std::size_t k = 0; k < m; ++k) u[k] *= v[k];
  fft_pow2(u, true);

  for (std::size_t k = 0; k < n; ++k) a[k] = u[k] * chirp[k];
  if (inverse) {
    for (auto& x : a) x /= static_cast<double>(n);
  }
}

}  // namespace

void dft_inplace(std::vector<std::complex<double>>& x, bool inverse) {
  if (x.empty()) return;
  if (is_pow2(x.size())) {
    fft_pow2(x, inverse);
  } else {
    fft_bluestein(x, inverse);
  }
}

std::vector<double> rfft(const double* x, int64_t n) {
  std::vector<std::complex<double>> buf(static_cast<std::size_t>(n));
  for (int64_t i = 0; i < n; ++i) buf[static_cast<std::size_t>(i)] = {x[i], 0.0};
  dft_inplace(buf, false);
  const int64_t bins = n / 2 + 1;
  std::vector<double> out(static_cast<std::size_t>(2 * bins));
  for (int64_t k = 0; k < bins; ++k) {
    out[static_cast<std::size_t>(2 * k)] = buf[static_cast<std::size_t>(k)].real();
    out[static_cast<std::size_t>(2 * k + 1)] = buf[static_cast<std::size_t>(k)].imag();
  }
  return out;
}

}  // namespace eegm2::fft
