#include "doctest.h"
#include "snnlm/config.hpp"

using namespace snnlm;

TEST_SUITE("config") {

TEST_CASE("INI parsing: sections, comments, typed values") {
  const std::string ini = R"(
# a comment
[model]
n_layer = 2
d_model = 48   ; trailing comment
[train]
lr = 0.005
steps = 42
[data]
split_ratio = 0.8
corpus_path = some/corpus.txt
)";
  RunConfig cfg = parse_run_config(ini);
  CHECK(cfg.n_layer == 2);
  CHECK(cfg.d_model == 48);
  CHECK(cfg.train_lr == 0.005);
  CHECK(cfg.train_steps == 42);
  CHECK(cfg.split_ratio == 0.8);
  CHECK(cfg.corpus_path == "some/corpus.txt");
  CHECK(cfg.n_head == 4);  // untouched default
}

TEST_CASE("config errors: unknown keys, bad types, bad ranges") {
  CHECK_THROWS_AS(parse_run_config("[model]\nbogus = 1\n"), Error);
  CHECK_THROWS_AS(parse_run_config("[train]\nsteps = many\n"), Error);
  CHECK_THROWS_AS(parse_run_config("[data]\nsplit_ratio = 1.5\n"), Error);
  CHECK_THROWS_AS(parse_run_config("key_outside_section = 1\n"), Error);
  CHECK_THROWS_AS(parse_run_config("[model\nn_layer = 1\n"), Error);
  RunConfig cfg;
  CHECK_THROWS_AS(apply_override(cfg, "no_equals_sign"), Error);
  CHECK_THROWS_AS(apply_override(cfg, "snn.reset=sideways"), Error);
  apply_override(cfg, "snn.reset=zero");
  CHECK(cfg.snn_reset == "zero");
}

TEST_CASE("ingest: 'abcabc' at ratio 0.5 gives vocab {a,b,c} and equal halves") {
  Corpus c = ingest_corpus_text("abcabc", 0.5);
  CHECK(c.vocab.size() == 3);
  CHECK(c.vocab.chars == std::vector<char32_t>{U'a', U'b', U'c'});
  CHECK(c.train_ids == std::vector<std::int32_t>{0, 1, 2});
  CHECK(c.val_ids == std::vector<std::int32_t>{0, 1, 2});
}

TEST_CASE("ingest: unicode corpus sorts the vocab by code point") {
  // U+00E9 (e-acute), U+0041 (A), U+4E2D; order must be by code point
  const std::string text = "\xC3\xA9"
                           "A"
                           "\xE4\xB8\xAD"
                           "A";
  Corpus c = ingest_corpus_text(text, 0.5);
  REQUIRE(c.vocab.size() == 3);
  CHECK(c.vocab.chars[0] == U'A');
  CHECK(c.vocab.chars[1] == char32_t{0xE9});
  CHECK(c.vocab.chars[2] == char32_t{0x4E2D});
}

TEST_CASE("ingest is deterministic: same text, same ids") {
  const std::string text = "hello world, hello again";
  Corpus a = ingest_corpus_text(text, 0.9);
  Corpus b = ingest_corpus_text(text, 0.9);
  CHECK(a.vocab.chars == b.vocab.chars);
  CHECK(a.train_ids == b.train_ids);
  CHECK(a.val_ids == b.val_ids);
}

TEST_CASE("vocab encode/decode round trip and unseen-character handling") {
  Corpus c = ingest_corpus_text("the quick brown fox", 0.9);
  const std::string msg = "the fox";
  auto ids = c.vocab.encode(msg);
  CHECK(c.vocab.decode(ids) == msg);
  CHECK_THROWS_AS(c.vocab.encode("zebra!"), Error);

  // byte fallback: an unseen code point decomposes into known byte values
  Corpus latin = ingest_corpus_text(std::string("ab\xC3\xA9"), 0.9);  // a, b, e-acute
  // U+00C3 is not in the vocab, and its UTF-8 bytes are not all present either
  CHECK_THROWS_AS(latin.vocab.encode("\xC3\x83", true), Error);
}

TEST_CASE("ingest errors") {
  CHECK_THROWS_AS(ingest_corpus_text("", 0.5), Error);
  CHECK_THROWS_AS(ingest_corpus("definitely_missing_file.txt", 0.5), Error);
}

}  // TEST_SUITE
