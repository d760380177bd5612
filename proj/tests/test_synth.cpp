#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "rfl/synth.hpp"

using namespace rfl;
namespace fs = std::filesystem;

namespace {

// 4-connected component count over a boolean grid (test-side oracle).
size_t component_count(const std::vector<bool>& ink, size_t h, size_t w) {
  std::vector<bool> seen(h * w, false);
  size_t components = 0;
  std::vector<size_t> stack;
  for (size_t start = 0; start < h * w; ++start) {
    if (!ink[start] || seen[start]) continue;
    ++components;
    stack.push_back(start);
    seen[start] = true;
    while (!stack.empty()) {
      const size_t p = stack.back();
      stack.pop_back();
      const size_t r = p / w, c = p % w;
      const size_t neigh[4][2] = {{r + 1, c}, {r - 1, c}, {r, c + 1}, {r, c - 1}};
      for (auto& n : neigh) {
        if (n[0] >= h || n[1] >= w) continue;
        const size_t q = n[0] * w + n[1];
        if (ink[q] && !seen[q]) {
          seen[q] = true;
          stack.push_back(q);
        }
      }
    }
  }
  return components;
}

CorpusSpec plain_spec() {
  CorpusSpec s;
  s.noise = 0.0;
  s.jitter = 0;
  s.scale_min = s.scale_max = 2;
  s.polarity_invert = false;
  return s;
}

struct TmpDir {
  fs::path path;
  explicit TmpDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TmpDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("font: every glyph is distinct and one 4-connected region") {
  std::set<std::string> seen;
  for (char c : font_alphabet()) {
    std::string flat;
    std::vector<bool> ink(kGlyphH * kGlyphW, false);
    for (size_t r = 0; r < kGlyphH; ++r)
      for (size_t col = 0; col < kGlyphW; ++col) {
        const bool on = glyph_pixel(c, r, col);
        flat.push_back(on ? '#' : '.');
        ink[r * kGlyphW + col] = on;
      }
    INFO("glyph '", c, "' = ", flat);
    CHECK(seen.insert(flat).second);
    CHECK(component_count(ink, kGlyphH, kGlyphW) == 1);
  }
  CHECK(font_alphabet().size() == 36);
  CHECK_THROWS_AS(glyph_pixel('?', 0, 0), ValueError);
}

TEST_CASE("render: scaled 'a' bitmap lands at the deterministic anchor") {
  CorpusSpec spec = plain_spec();
  Rng rng(derive_seed(7, "golden"));
  Sample s = render_sample(spec, "a", rng);
  CHECK(s.text == "a");
  CHECK(s.y_cnt == 1);
  REQUIRE(s.image.shape() == Shape{32, 100});

  // independent placement oracle: x0 = margin 2, y0 = (32 - 14) / 2 = 9
  const size_t scale = 2, x0 = 2, y0 = 9;
  for (size_t y = 0; y < 32; ++y)
    for (size_t x = 0; x < 100; ++x) {
      bool want = false;
      if (y >= y0 && y < y0 + kGlyphH * scale && x >= x0 &&
          x < x0 + kGlyphW * scale)
        want = glyph_pixel('a', (y - y0) / scale, (x - x0) / scale);
      CHECK(s.image.at({y, x}) == (want ? 1.0 : 0.0));
    }
}

TEST_CASE("render: same rng state gives bit-identical images") {
  CorpusSpec spec;  // defaults: noise, jitter, inversion all active
  Rng a(derive_seed(3, "x")), b(derive_seed(3, "x"));
  Sample sa = render_sample(spec, "abcj", a);
  Sample sb = render_sample(spec, "abcj", b);
  CHECK(sa.image.data() == sb.image.data());
}

TEST_CASE("render: y_cnt of rendered 'cnt' is 3") {
  CorpusSpec spec = plain_spec();
  spec.alphabet = font_alphabet();
  Rng rng(1);
  Sample s = render_sample(spec, "cnt", rng);
  CHECK(s.y_cnt == 3);
  CHECK(size_t(s.y_cnt) == s.text.size());
}

TEST_CASE("render: component count equals text length without noise") {
  CorpusSpec spec = plain_spec();
  spec.jitter = 1;  // jitter alone must not merge or split glyphs
  Rng rng(derive_seed(11, "cc"));
  for (const std::string text : {"a", "fij", "abcdefg", "jjjj"}) {
    Sample s = render_sample(spec, text, rng);
    std::vector<bool> ink(s.image.numel());
    for (size_t i = 0; i < ink.size(); ++i) ink[i] = s.image.data()[i] > 0.5;
    CHECK(component_count(ink, 32, 100) == text.size());
  }
}

TEST_CASE("render: too-long text rejected") {
  CorpusSpec spec = plain_spec();
  Rng rng(1);
  CHECK_THROWS_AS(render_sample(spec, "aaaaaaaaaa", rng), ValueError);
  CorpusSpec wide = plain_spec();
  wide.l_max = 30;
  CHECK_THROWS_AS(validate_spec(wide), ValueError);
}

TEST_CASE("pgm: bytes round trip exactly with the expected header") {
  TmpDir tmp("rfl_pgm_test");
  std::vector<uint8_t> px = {0, 17, 255, 128, 9, 77};
  const std::string path = (tmp.path / "t.pgm").string();
  write_pgm(path, px, 3, 2);

  std::ifstream raw(path, std::ios::binary);
  std::string header;
  std::getline(raw, header);
  CHECK(header == "P5");
  std::getline(raw, header);
  CHECK(header == "3 2");
  std::getline(raw, header);
  CHECK(header == "255");

  size_t w = 0, h = 0;
  auto back = read_pgm(path, w, h);
  CHECK(w == 3);
  CHECK(h == 2);
  CHECK(back == px);

  CHECK_THROWS_AS(read_pgm((tmp.path / "missing.pgm").string(), w, h), IoError);
}

TEST_CASE("manifest: round trip, tab rejection, empty file") {
  TmpDir tmp("rfl_manifest_test");
  const std::string path = (tmp.path / "manifest.tsv").string();
  std::vector<ManifestEntry> entries = {{"images/000001.pgm", "abc"},
                                        {"images/000002.pgm", "j"}};
  write_manifest(path, entries);
  auto back = read_manifest(path);
  REQUIRE(back.size() == 2);
  CHECK(back[0].image_path == entries[0].image_path);
  CHECK(back[0].text == entries[0].text);
  CHECK(back[1].text == "j");

  CHECK_THROWS_AS(write_manifest(path, {{"a.pgm", "ab\tc"}}), ValueError);

  {
    std::ofstream bad(path, std::ios::binary);
    bad << "images/x.pgm\tab\tc\n";
  }
  try {
    read_manifest(path);
    CHECK(false);
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("line 1") != std::string::npos);
  }

  {
    std::ofstream empty(path, std::ios::binary);
  }
  CHECK(read_manifest(path).empty());
}

TEST_CASE("generate_corpus: manifest rows, lengths, histogram, determinism") {
  TmpDir tmp("rfl_gen_test");
  CorpusSpec spec;
  spec.count = 100;
  spec.seed = 7;
  auto res = generate_corpus(spec, tmp.path.string());
  auto entries = read_manifest(res.manifest_path);
  CHECK(entries.size() == 100);
  size_t hist_total = 0;
  for (size_t n : res.length_histogram) hist_total += n;
  CHECK(hist_total == 100);
  for (const auto& e : entries) {
    CHECK(e.text.size() >= spec.l_min);
    CHECK(e.text.size() <= spec.l_max);
  }

  // regenerate with the same seed: identical bytes
  TmpDir tmp2("rfl_gen_test2");
  generate_corpus(spec, tmp2.path.string());
  for (const auto& e : entries) {
    std::ifstream a(tmp.path / e.image_path, std::ios::binary);
    std::ifstream b(tmp2.path / e.image_path, std::ios::binary);
    std::string sa((std::istreambuf_iterator<char>(a)), {});
    std::string sb((std::istreambuf_iterator<char>(b)), {});
    CHECK(sa == sb);
  }

  Corpus c = Corpus::load(res.manifest_path);
  CHECK(c.size() == 100);
  CHECK(c.img_w == 100);
  for (size_t i = 0; i < c.size(); ++i)
    CHECK(c.texts[i] == entries[i].text);
  Tensor img = c.image_tensor(0);
  CHECK(img.shape() == Shape{1, 32, 100});
  for (double v : img.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("generate_corpus: missing image file reported with its path") {
  TmpDir tmp("rfl_gen_missing");
  CorpusSpec spec;
  spec.count = 3;
  auto res = generate_corpus(spec, tmp.path.string());
  fs::remove(tmp.path / "images" / "000001.pgm");
  try {
    Corpus::load(res.manifest_path);
    CHECK(false);
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("000001.pgm") != std::string::npos);
  }
}

TEST_CASE("generate_corpus: disjoint seeds give low text overlap") {
  // Longer words make the text space large enough for a meaningful check.
  CorpusSpec train;
  train.l_min = 4;
  train.count = 5000;
  train.seed = 100;
  CorpusSpec test = train;
  test.count = 1000;
  test.seed = 200;

  std::set<std::string> train_texts;
  for (size_t i = 0; i < train.count; ++i) {
    Rng rng(derive_seed(train.seed, "sample-" + std::to_string(i)));
    train_texts.insert(random_text(train, rng));
  }
  size_t overlap = 0;
  for (size_t i = 0; i < test.count; ++i) {
    Rng rng(derive_seed(test.seed, "sample-" + std::to_string(i)));
    if (train_texts.count(random_text(test, rng))) ++overlap;
  }
  CHECK(double(overlap) / double(test.count) < 0.05);
}
