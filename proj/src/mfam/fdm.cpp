#include "mfam/fdm.hpp"

#include <algorithm>
#include <cmath>

#include "mfam/error.hpp"

namespace mfam {

namespace {

constexpr double kPi = 3.14159265358979323846;

bool is_pow2(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

// Iterative radix-2 Cooley-Tukey; n must be a power of two.
void fft_pow2(std::vector<std::complex<double>>& a, bool inverse) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = 2.0 * kPi / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
    for (std::size_t i = 0; i < n; i += len) {
      for (std::size_t j = 0; j < len / 2; ++j) {
        const std::complex<double> w =
            std::polar(1.0, ang * static_cast<double>(j));
        const std::complex<double> u = a[i + j];
        const std::complex<double> v = a[i + j + len / 2] * w;
        a[i + j] = u + v;
        a[i + j + len / 2] = u - v;
      }
    }
  }
  if (inverse) {
    for (auto& v : a) v /= static_cast<double>(n);
  }
}

// Bluestein chirp-z for arbitrary n, via a power-of-two convolution.
// The chirp exponent n^2/2 is reduced mod 2n in integers to keep the
// twiddle arguments accurate for large n.
void fft_bluestein(std::vector<std::complex<double>>& a, bool inverse) {
  const std::size_t n = a.size();
  const std::size_t m = next_pow2(2 * n - 1);
  std::vector<std::complex<double>> chirp(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t sq = (static_cast<std::uint64_t>(i) * i) % (2 * n);
    const double ang = kPi * static_cast<double>(sq) / static_cast<double>(n);
    chirp[i] = std::polar(1.0, inverse ? ang : -ang);
  }
  std::vector<std::complex<double>> fa(m), fb(m);
  for (std::size_t i = 0; i < n; ++i) fa[i] = a[i] * chirp[i];
  fb[0] = std::conj(chirp[0]);
  for (std::size_t i = 1; i < n; ++i) {
    fb[i] = std::conj(chirp[i]);
    fb[m - i] = fb[i];
  }
  fft_pow2(fa, false);
  fft_pow2(fb, false);
  for (std::size_t i = 0; i < m; ++i) fa[i] *= fb[i];
  fft_pow2(fa, true);
  for (std::size_t i = 0; i < n; ++i) a[i] = fa[i] * chirp[i];
  if (inverse) {
    for (auto& v : a) v /= static_cast<double>(n);
  }
}

}  // namespace

void fft_inplace(std::vector<std::complex<double>>& a, bool inverse) {
  if (a.size() <= 1) return;
  if (is_pow2(a.size()))
    fft_pow2(a, inverse);
  else
    fft_bluestein(a, inverse);
}

Spectrum rfft(std::span<const double> x, double fs) {
  const std::size_t t_len = x.size();
  if (t_len < 2) fail(ErrorCode::Length, "rfft: need at least 2 samples, got " + std::to_string(t_len));
  if (fs <= 0.0) fail(ErrorCode::Domain, "rfft: sampling rate must be positive");
  std::vector<std::complex<double>> a(t_len);
  for (std::size_t i = 0; i < t_len; ++i) a[i] = {x[i], 0.0};
  fft_inplace(a, false);
  Spectrum s;
  s.fs = fs;
  s.T = t_len;
  s.bins.assign(a.begin(), a.begin() + static_cast<long>(t_len / 2 + 1));
  return s;
}

std::vector<double> irfft(const Spectrum& s, std::size_t T) {
  if (s.T != T)
    fail(ErrorCode::Length, "irfft: spectrum was built for T=" + std::to_string(s.T) +
                                ", requested T=" + std::to_string(T));
  if (s.bins.size() != T / 2 + 1)
    fail(ErrorCode::Length, "irfft: expected " + std::to_string(T / 2 + 1) + " bins, got " +
                                std::to_string(s.bins.size()));
  std::vector<std::complex<double>> full(T);
  for (std::size_t k = 0; k < s.bins.size(); ++k) full[k] = s.bins[k];
  for (std::size_t k = 1; k < (T + 1) / 2; ++k) full[T - k] = std::conj(s.bins[k]);
  fft_inplace(full, true);
  std::vector<double> out(T);
  for (std::size_t i = 0; i < T; ++i) out[i] = full[i].real();
  return out;
}

BandMask band_mask(std::size_t T, double fs, double f_low, double f_high) {
  if (T < 2) fail(ErrorCode::Length, "band_mask: need T >= 2");
  if (!(f_low >= 0.0) || !(f_low < f_high) || !(f_high <= fs / 2.0))
    fail(ErrorCode::Domain, "band_mask: band [" + std::to_string(f_low) + ", " +
                                std::to_string(f_high) + ") must satisfy 0 <= low < high <= fs/2");
  BandMask m;
  m.values.assign(T / 2 + 1, 0);
  for (std::size_t k = 0; k < m.values.size(); ++k) {
    const double f = static_cast<double>(k) * fs / static_cast<double>(T);
    if (f >= f_low && f < f_high) m.values[k] = 1;
  }
  return m;
}

BandSet BandSet::tremor_defaults() {
  return BandSet{{{0.5, 3.0}, {3.0, 7.0}, {7.0, 12.0}}};
}

void BandSet::validate(double fs) const {
  if (bands.empty()) fail(ErrorCode::Domain, "band set is empty");
  for (const Band& b : bands) {
    if (!(b.f_low >= 0.0) || !(b.f_low < b.f_high) || !(b.f_high <= fs / 2.0))
      fail(ErrorCode::Domain, "band [" + std::to_string(b.f_low) + ", " +
                                  std::to_string(b.f_high) +
                                  ") must satisfy 0 <= low < high <= fs/2");
  }
  std::vector<Band> sorted = bands;
  std::sort(sorted.begin(), sorted.end(),
            [](const Band& a, const Band& b) { return a.f_low < b.f_low; });
  for (std::size_t i = 1; i < sorted.size(); ++i) {
    if (sorted[i - 1].f_high > sorted[i].f_low)
      fail(ErrorCode::Domain, "bands overlap under the half-open convention");
  }
}

Tensor frequency_decompose(const Tensor& x, const BandSet& bands, double fs) {
  if (x.rank() != 2) fail(ErrorCode::Shape, "frequency_decompose: expected [C x T] input");
  const std::size_t c = x.dim(0), t_len = x.dim(1);
  if (t_len < 2) fail(ErrorCode::Length, "frequency_decompose: need T >= 2");
  bands.validate(fs);

  std::vector<BandMask> masks;
  masks.reserve(bands.size());
  for (const Band& b : bands.bands) masks.push_back(band_mask(t_len, fs, b.f_low, b.f_high));

  Tensor out({c * bands.size(), t_len});
  for (std::size_t ci = 0; ci < c; ++ci) {
    const Spectrum spec = rfft(std::span<const double>(&x.data[ci * t_len], t_len), fs);
    for (std::size_t b = 0; b < bands.size(); ++b) {
      Spectrum masked = spec;
      for (std::size_t k = 0; k < masked.bins.size(); ++k)
        if (!masks[b].values[k]) masked.bins[k] = {0.0, 0.0};
      const std::vector<double> y = irfft(masked, t_len);
      std::copy(y.begin(), y.end(), out.data.begin() + static_cast<long>((b * c + ci) * t_len));
    }
  }
  return out;
}

double signal_energy(std::span<const double> x) {
  double e = 0.0;
  for (double v : x) e += v * v;
  return e;
}

}  // namespace mfam
