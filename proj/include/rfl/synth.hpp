#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rfl/rng.hpp"
#include "rfl/tensor.hpp"

namespace rfl {

// Baked-in 5x7 bitmap font for lowercase a-z and digits 0-9. Every glyph is
// a single 4-connected ink region and all glyphs are distinct.
inline constexpr size_t kGlyphW = 5;
inline constexpr size_t kGlyphH = 7;
const std::string& font_alphabet();
bool glyph_pixel(char c, size_t row, size_t col);

struct Sample {
  Tensor image;  // [h,w] grayscale in [0,1]
  std::string text;
  int y_cnt = 0;  // character count, always len(text)
};

struct CorpusSpec {
  std::string alphabet = "abcdefghij";
  size_t l_min = 1, l_max = 7;
  size_t count = 1000;
  size_t img_h = 32, img_w = 100;
  double noise = 0.25;   // additive uniform noise amplitude
  size_t jitter = 2;     // max glyph placement jitter, pixels
  size_t scale_min = 2, scale_max = 4;
  size_t spacing = 1;    // inter-glyph gap, pixels
  bool polarity_invert = true;
  uint64_t seed = 1;
};

// Throws ValueError when the longest allowed text cannot fit the canvas even
// at the smallest scale (worst-case jitter included).
void validate_spec(const CorpusSpec& spec);

// Deterministic given the rng state. Glyphs are scaled by an integer factor,
// placed left to right with jittered spacing and vertical offset; uniform
// noise is added and clipped to [0,1]; polarity may be inverted.
Sample render_sample(const CorpusSpec& spec, const std::string& text, Rng& rng);

// Draws a random text per the spec (uniform length, then uniform characters).
std::string random_text(const CorpusSpec& spec, Rng& rng);

struct ManifestEntry {
  std::string image_path;  // relative to the manifest's directory
  std::string text;
};

// 8-bit binary PGM (P5).
void write_pgm(const std::string& path, const std::vector<uint8_t>& pixels,
               size_t w, size_t h);
std::vector<uint8_t> read_pgm(const std::string& path, size_t& w, size_t& h);

// TSV manifest: "relative-image-path<TAB>transcription", LF line endings.
void write_manifest(const std::string& path,
                    const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> read_manifest(const std::string& path);

struct GenerateResult {
  std::string manifest_path;
  std::vector<size_t> length_histogram;  // indexed by text length
};

GenerateResult generate_corpus(const CorpusSpec& spec,
                               const std::string& out_dir);

// A corpus held in memory: image bytes plus transcriptions.
struct Corpus {
  size_t img_h = 0, img_w = 0;
  std::vector<std::vector<uint8_t>> images;
  std::vector<std::string> texts;

  size_t size() const { return texts.size(); }
  std::vector<int> lengths() const;
  // image i as a [1,h,w] tensor scaled to [0,1]
  Tensor image_tensor(size_t i) const;
  // concatenates another corpus of identical image dimensions
  void append(const Corpus& other);

  static Corpus load(const std::string& manifest_path);
  static Corpus render_in_memory(const CorpusSpec& spec);
};

}  // namespace rfl
