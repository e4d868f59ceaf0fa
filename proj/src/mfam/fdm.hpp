#pragma once

#include <complex>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "mfam/tensor.hpp"

namespace mfam {

// One-sided spectrum of a real signal: floor(T/2)+1 bins, bin k at k*fs/T Hz.
struct Spectrum {
  std::vector<std::complex<double>> bins;
  double fs = 0.0;
  std::size_t T = 0;
};

struct Band {
  double f_low = 0.0;
  double f_high = 0.0;
};

// Ordered frequency intervals; pairwise disjoint under the half-open
// [f_low, f_high) convention, each within [0, fs/2].
struct BandSet {
  std::vector<Band> bands;

  static BandSet tremor_defaults();  // (0.5,3) (3,7) (7,12) Hz
  void validate(double fs) const;
  std::size_t size() const { return bands.size(); }
};

struct BandMask {
  std::vector<std::uint8_t> values;  // one per spectrum bin, in {0,1}
};

Spectrum rfft(std::span<const double> x, double fs);
std::vector<double> irfft(const Spectrum& s, std::size_t T);

// values[k] = 1 iff f_low <= k*fs/T < f_high
BandMask band_mask(std::size_t T, double fs, double f_low, double f_high);

// FFT -> per-band mask -> IFFT -> concatenate along the channel axis.
// Output channel (b*C + c) is channel c filtered to band b. Fixed transform,
// not part of any gradient tape.
Tensor frequency_decompose(const Tensor& x, const BandSet& bands, double fs);

double signal_energy(std::span<const double> x);

// Complex FFT of arbitrary length (radix-2, Bluestein for the rest);
// exposed for the spectral test oracles.
void fft_inplace(std::vector<std::complex<double>>& a, bool inverse);

}  // namespace mfam
