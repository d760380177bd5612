#include "rfl/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;

namespace rfl {

namespace {

// Rows are listed top to bottom, '#' is ink. Letters sit low (rows 2-6),
// digits use the full height, which keeps the two groups easy to tell apart.
struct GlyphDef {
  char ch;
  const char* rows[7];
};

constexpr GlyphDef kFont[] = {
    {'a', {".....", ".....", ".####", "....#", "#####", "#...#", ".####"}},
    {'b', {"#....", "#....", "#####", "#...#", "#...#", "#...#", "####."}},
    {'c', {".....", ".....", "#####", "#....", "#....", "#....", "#####"}},
    {'d', {"....#", "....#", "#####", "#...#", "#...#", "#...#", ".####"}},
    {'e', {".....", ".....", "#####", "#...#", "#####", "#....", "####."}},
    {'f', {"..###", "..#..", "..#..", "#####", "..#..", "..#..", "..#.."}},
    {'g', {".....", ".....", "#####", "#...#", "#####", "....#", ".####"}},
    {'h', {"#....", "#....", "#####", "#...#", "#...#", "#...#", "#...#"}},
    {'i', {".###.", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."}},
    {'j', {"...##", "....#", "....#", "....#", "....#", "#...#", "#####"}},
    {'k', {"#....", "#....", "#...#", "#.###", "###..", "#.###", "#...#"}},
    {'l', {"..#..", "..#..", "..#..", "..#..", "..#..", "..#..", "..###"}},
    {'m', {".....", ".....", "#####", "#.#.#", "#.#.#", "#.#.#", "#.#.#"}},
    {'n', {".....", ".....", "#####", "#...#", "#...#", "#...#", "#...#"}},
    {'o', {".....", ".....", ".....", "#####", "#...#", "#...#", "#####"}},
    {'p', {".....", ".....", "#####", "#...#", "#####", "#....", "#...."}},
    {'q', {".....", ".....", "#####", "#...#", "#####", "....#", "....#"}},
    {'r', {".....", ".....", "#####", "#....", "#....", "#....", "#...."}},
    {'s', {".....", ".....", "#####", "#....", "#####", "....#", "#####"}},
    {'t', {"..#..", "..#..", "#####", "..#..", "..#..", "..#..", "..###"}},
    {'u', {".....", ".....", "#...#", "#...#", "#...#", "#...#", "#####"}},
    {'v', {".....", ".....", "#...#", "#...#", "#...#", "##.##", ".###."}},
    {'w', {".....", ".....", "#.#.#", "#.#.#", "#.#.#", "#.#.#", "#####"}},
    {'x', {".....", ".....", "#...#", "##.##", ".###.", "##.##", "#...#"}},
    {'y', {".....", ".....", "#...#", "#...#", "#####", "....#", "#####"}},
    {'z', {".....", ".....", "#####", "....#", "#####", "#....", "#####"}},
    {'0', {"#####", "#...#", "#...#", "#...#", "#...#", "#...#", "#####"}},
    {'1', {"..#..", ".##..", "..#..", "..#..", "..#..", "..#..", "#####"}},
    {'2', {"#####", "....#", "....#", "#####", "#....", "#....", "#####"}},
    {'3', {"#####", "....#", "#####", "....#", "....#", "....#", "#####"}},
    {'4', {"#...#", "#...#", "#####", "....#", "....#", "....#", "....#"}},
    {'5', {"#####", "#....", "#####", "....#", "....#", "#...#", "#####"}},
    {'6', {"#####", "#....", "#####", "#...#", "#...#", "#...#", "#####"}},
    {'7', {"#####", "....#", "....#", "....#", "....#", "....#", "....#"}},
    {'8', {"#####", "#...#", "#####", "#...#", "#####", "#...#", "#####"}},
    {'9', {"#####", "#...#", "#####", "....#", "....#", "....#", "#####"}},
};

const GlyphDef* find_glyph(char c) {
  for (const GlyphDef& g : kFont)
    if (g.ch == c) return &g;
  return nullptr;
}

constexpr size_t kMarginX = 2;

}  // namespace

const std::string& font_alphabet() {
  static const std::string a = "abcdefghijklmnopqrstuvwxyz0123456789";
  return a;
}

bool glyph_pixel(char c, size_t row, size_t col) {
  const GlyphDef* g = find_glyph(c);
  if (!g) throw ValueError(std::string("no glyph for character '") + c + "'");
  if (row >= kGlyphH || col >= kGlyphW)
    throw ValueError("glyph pixel out of range");
  return g->rows[row][col] == '#';
}

void validate_spec(const CorpusSpec& spec) {
  if (spec.alphabet.empty()) throw ValueError("empty alphabet");
  for (char c : spec.alphabet)
    if (!find_glyph(c))
      throw ValueError(std::string("alphabet character '") + c +
                       "' has no glyph");
  if (spec.l_min == 0 || spec.l_min > spec.l_max)
    throw ValueError("invalid length range");
  if (spec.scale_min == 0 || spec.scale_min > spec.scale_max)
    throw ValueError("invalid scale range");
  if (spec.img_h < kGlyphH * spec.scale_min)
    throw ValueError("canvas shorter than a glyph at the smallest scale");
  const size_t advance =
      kGlyphW * spec.scale_min + spec.spacing + spec.jitter;
  const size_t needed = spec.l_max * advance + 2 * kMarginX;
  if (needed > spec.img_w)
    throw ValueError("l_max " + std::to_string(spec.l_max) +
                     " cannot fit canvas width " + std::to_string(spec.img_w) +
                     " (needs " + std::to_string(needed) + ")");
}

Sample render_sample(const CorpusSpec& spec, const std::string& text,
                     Rng& rng) {
  validate_spec(spec);
  if (text.empty() || text.size() > spec.l_max)
    throw ValueError("text length outside the corpus range");
  const size_t h = spec.img_h, w = spec.img_w;

  // Scales at which this text fits even with worst-case jitter.
  std::vector<size_t> scales;
  for (size_t s = spec.scale_min; s <= spec.scale_max; ++s) {
    const size_t need =
        text.size() * (kGlyphW * s + spec.spacing + spec.jitter) + 2 * kMarginX;
    if (need <= w && kGlyphH * s <= h) scales.push_back(s);
  }
  if (scales.empty()) throw ValueError("text too long for canvas");
  const size_t scale = scales[rng.below(scales.size())];

  const bool invert = spec.polarity_invert && rng.uniform() < 0.5;

  std::vector<double> img(h * w, 0.0);
  size_t x = kMarginX + (spec.jitter > 0 ? rng.below(spec.jitter + 1) : 0);
  const size_t y_base = (h - kGlyphH * scale) / 2;
  for (char c : text) {
    long y = long(y_base);
    if (spec.jitter > 0)
      y += long(rng.below(2 * spec.jitter + 1)) - long(spec.jitter);
    y = std::clamp(y, 0L, long(h - kGlyphH * scale));
    for (size_t gr = 0; gr < kGlyphH; ++gr)
      for (size_t gc = 0; gc < kGlyphW; ++gc) {
        if (!glyph_pixel(c, gr, gc)) continue;
        for (size_t sy = 0; sy < scale; ++sy)
          for (size_t sx = 0; sx < scale; ++sx)
            img[(size_t(y) + gr * scale + sy) * w + x + gc * scale + sx] = 1.0;
      }
    size_t advance = kGlyphW * scale + spec.spacing;
    if (spec.jitter > 0) advance += rng.below(spec.jitter + 1);
    x += advance;
  }
  if (spec.noise > 0.0)
    for (double& v : img)
      v = std::clamp(v + rng.uniform(-spec.noise, spec.noise), 0.0, 1.0);
  if (invert)
    for (double& v : img) v = 1.0 - v;

  Sample out;
  out.image = Tensor::from_data({h, w}, std::move(img));
  out.text = text;
  out.y_cnt = int(text.size());
  return out;
}

std::string random_text(const CorpusSpec& spec, Rng& rng) {
  const size_t len = spec.l_min + rng.below(spec.l_max - spec.l_min + 1);
  std::string text(len, '?');
  for (char& c : text) c = spec.alphabet[rng.below(spec.alphabet.size())];
  return text;
}

// ---------------------------------------------------------------------------
// PGM

void write_pgm(const std::string& path, const std::vector<uint8_t>& pixels,
               size_t w, size_t h) {
  if (pixels.size() != w * h) throw ShapeError("pgm pixel count mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "P5\n" << w << " " << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()),
            std::streamsize(pixels.size()));
  if (!out) throw IoError("failed writing PGM: " + path);
}

std::vector<uint8_t> read_pgm(const std::string& path, size_t& w, size_t& h) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image: " + path);
  std::string magic;
  in >> magic;
  if (magic != "P5") throw IoError("not a binary PGM (P5): " + path);
  auto next_token = [&in, &path]() -> long {
    // skip whitespace and '#' comment lines
    for (;;) {
      int c = in.peek();
      if (c == '#') {
        std::string line;
        std::getline(in, line);
      } else if (std::isspace(c)) {
        in.get();
      } else {
        break;
      }
    }
    long v;
    if (!(in >> v)) throw IoError("bad PGM header: " + path);
    return v;
  };
  const long lw = next_token(), lh = next_token(), maxval = next_token();
  if (lw <= 0 || lh <= 0) throw IoError("bad PGM dimensions: " + path);
  if (maxval != 255) throw IoError("only 8-bit PGM supported: " + path);
  in.get();  // single whitespace after header
  w = size_t(lw);
  h = size_t(lh);
  std::vector<uint8_t> pixels(w * h);
  in.read(reinterpret_cast<char*>(pixels.data()), std::streamsize(pixels.size()));
  if (!in) throw IoError("truncated PGM data: " + path);
  return pixels;
}

// ---------------------------------------------------------------------------
// Manifest

void write_manifest(const std::string& path,
                    const std::vector<ManifestEntry>& entries) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  for (const ManifestEntry& e : entries) {
    if (e.image_path.find('\t') != std::string::npos ||
        e.text.find('\t') != std::string::npos)
      throw ValueError("tab characters are not allowed in manifest fields");
    if (e.text.find('\n') != std::string::npos)
      throw ValueError("newlines are not allowed in transcriptions");
    out << e.image_path << "\t" << e.text << "\n";
  }
  if (!out) throw IoError("failed writing manifest: " + path);
}

std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open manifest: " + path);
  std::vector<ManifestEntry> out;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const size_t tab = line.find('\t');
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos)
      throw IoError("malformed manifest row at line " +
                    std::to_string(line_no) + " in " + path);
    out.push_back({line.substr(0, tab), line.substr(tab + 1)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Corpus generation

GenerateResult generate_corpus(const CorpusSpec& spec,
                               const std::string& out_dir) {
  validate_spec(spec);
  const fs::path dir(out_dir);
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  if (ec) throw IoError("cannot create output directory: " + out_dir);

  GenerateResult result;
  result.length_histogram.assign(spec.l_max + 1, 0);
  std::vector<ManifestEntry> entries;
  entries.reserve(spec.count);
  for (size_t i = 0; i < spec.count; ++i) {
    Rng rng(derive_seed(spec.seed, "sample-" + std::to_string(i)));
    const std::string text = random_text(spec, rng);
    Sample smp = render_sample(spec, text, rng);
    std::vector<uint8_t> bytes(smp.image.numel());
    for (size_t p = 0; p < bytes.size(); ++p)
      bytes[p] = uint8_t(std::lround(smp.image.data()[p] * 255.0));
    char name[32];
    std::snprintf(name, sizeof name, "images/%06zu.pgm", i);
    write_pgm((dir / name).string(), bytes, spec.img_w, spec.img_h);
    entries.push_back({name, text});
    result.length_histogram[text.size()] += 1;
  }
  result.manifest_path = (dir / "manifest.tsv").string();
  write_manifest(result.manifest_path, entries);
  return result;
}

std::vector<int> Corpus::lengths() const {
  std::vector<int> out(texts.size());
  for (size_t i = 0; i < texts.size(); ++i) out[i] = int(texts[i].size());
  return out;
}

Tensor Corpus::image_tensor(size_t i) const {
  std::vector<double> v(images[i].size());
  for (size_t p = 0; p < v.size(); ++p) v[p] = double(images[i][p]) / 255.0;
  return Tensor::from_data({1, img_h, img_w}, std::move(v));
}

void Corpus::append(const Corpus& other) {
  if (size() == 0) {
    img_h = other.img_h;
    img_w = other.img_w;
  } else if (other.img_h != img_h || other.img_w != img_w) {
    throw ShapeError("cannot append a corpus with different image dimensions");
  }
  images.insert(images.end(), other.images.begin(), other.images.end());
  texts.insert(texts.end(), other.texts.begin(), other.texts.end());
}

Corpus Corpus::load(const std::string& manifest_path) {
  const auto entries = read_manifest(manifest_path);
  const fs::path base = fs::path(manifest_path).parent_path();
  Corpus c;
  for (const ManifestEntry& e : entries) {
    size_t w = 0, h = 0;
    const std::string img_path = (base / e.image_path).string();
    if (!fs::exists(img_path))
      throw IoError("manifest references missing image: " + img_path);
    c.images.push_back(read_pgm(img_path, w, h));
    if (c.texts.empty()) {
      c.img_w = w;
      c.img_h = h;
    } else if (w != c.img_w || h != c.img_h) {
      throw IoError("inconsistent image sizes in corpus: " + img_path);
    }
    c.texts.push_back(e.text);
  }
  return c;
}

Corpus Corpus::render_in_memory(const CorpusSpec& spec) {
  validate_spec(spec);
  Corpus c;
  c.img_h = spec.img_h;
  c.img_w = spec.img_w;
  for (size_t i = 0; i < spec.count; ++i) {
    Rng rng(derive_seed(spec.seed, "sample-" + std::to_string(i)));
    const std::string text = random_text(spec, rng);
    Sample smp = render_sample(spec, text, rng);
    std::vector<uint8_t> bytes(smp.image.numel());
    for (size_t p = 0; p < bytes.size(); ++p)
      bytes[p] = uint8_t(std::lround(smp.image.data()[p] * 255.0));
    c.images.push_back(std::move(bytes));
    c.texts.push_back(text);
  }
  return c;
}

}  // namespace rfl
