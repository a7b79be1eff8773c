// Data layer: vocabulary construction, JSONL IO, the synthetic grammar and
// its exact rule referee, corpora generators, and low-resource splits.

#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "edu/edu.hpp"

using namespace edu;

TEST_CASE("tokenize and detokenize round trip") {
    auto toks = tokenize("  i have a   dog .");
    CHECK(toks == std::vector<std::string>{"i", "have", "a", "dog", "."});
    CHECK(detokenize(toks) == "i have a dog .");
    CHECK(tokenize("").empty());
}

TEST_CASE("build_vocab orders by frequency then lexicographically, reserved first") {
    Vocabulary v = build_vocab({"b b b a a c", "a"});
    CHECK(v.id("[PAD]") == Vocabulary::kPad);
    CHECK(v.id("[BOS]") == Vocabulary::kBos);
    CHECK(v.id("[EOS]") == Vocabulary::kEos);
    CHECK(v.id("[s]") == Vocabulary::kSep);
    CHECK(v.id("a") == 4);  // 3 occurrences each; "a" < "b"
    CHECK(v.id("b") == 5);
    CHECK(v.id("c") == 6);
    CHECK(v.size() == 7);
    CHECK_THROWS_AS(v.id("zebra"), DataError);
    CHECK(v.decode(v.encode("c a b")) == "c a b");
}

TEST_CASE("jsonl round trip with line-numbered errors") {
    const std::string dir = "/tmp/edu_test_data";
    std::filesystem::create_directories(dir);
    const std::string dpath = dir + "/d.jsonl";
    const std::string npath = dir + "/n.jsonl";

    std::vector<DialogueExample> dialogues(2);
    dialogues[0] = {1, {"i have a dog", "i like chess"}, "do you have a pet ?", "i have a dog"};
    dialogues[1] = {2, {"i live in boston"}, "where do you live ?", "i live in boston"};
    save_dialogue_jsonl(dialogues, dpath);
    auto loaded = load_dialogue_jsonl(dpath);
    REQUIRE(loaded.size() == 2);
    CHECK(loaded[0].personas == dialogues[0].personas);
    CHECK(loaded[1].response == dialogues[1].response);

    std::vector<InferenceExample> nli(2);
    nli[0] = {"i have a dog", "my pet is a dog", NliLabel::Entailment};
    nli[1] = {"i have a dog", "i do not have a dog", NliLabel::Contradiction};
    save_nli_jsonl(nli, npath);
    auto nloaded = load_nli_jsonl(npath);
    REQUIRE(nloaded.size() == 2);
    CHECK(nloaded[1].label == NliLabel::Contradiction);

    std::ofstream bad(npath, std::ios::app);
    bad << "{\"premise\": \"x\", \"hypothesis\": \"y\", \"label\": \"maybe\"}\n";
    bad.close();
    try {
        load_nli_jsonl(npath);
        FAIL("expected a load error");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find(":3:") != std::string::npos);
    }
}

TEST_CASE("referee closure over the whole grammar") {
    for (Slot s : all_slots()) {
        for (const auto& v : slot_values(s)) {
            const std::string persona = statement(s, v);
            CHECK(rule_referee(statement(s, v), persona) == +1);
            CHECK(rule_referee(paraphrase(s, v), persona) == +1);
            CHECK(rule_referee(negation(s, v), persona) == -1);
            for (const auto& w : slot_values(s)) {
                if (w == v) continue;
                CHECK(rule_referee(statement(s, w), persona) == -1);  // exclusive slot
                CHECK(rule_referee(negation(s, w), persona) == 0);
            }
            for (Slot o : all_slots()) {
                if (o == s) continue;
                CHECK(rule_referee(statement(o, slot_values(o)[0]), persona) == 0);
            }
            CHECK(rule_referee("the weather is nice", persona) == 0);
            CHECK(rule_referee(statement(s, v), "gibberish sentence") == 0);
        }
    }
}

TEST_CASE("synthetic dialogues are deterministic and self-consistent") {
    auto a = synth_dialogue_corpus(123, 50);
    auto b = synth_dialogue_corpus(123, 50);
    REQUIRE(a.size() == 50);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].example.response == b[i].example.response);
        CHECK(a[i].example.personas.size() == 3);
        // the gold response entails exactly one persona sentence
        int total = 0;
        for (const auto& p : a[i].example.personas)
            total += rule_referee(a[i].example.response, p);
        CHECK(total == 1);
        CHECK(a[i].example.response == statement(a[i].probed_slot, a[i].probed_value));
    }
    auto c = synth_dialogue_corpus(124, 20);
    auto d = synth_dialogue_corpus(125, 20);
    bool differs = false;
    for (std::size_t i = 0; i < c.size() && !differs; ++i)
        differs = c[i].example.response != d[i].example.response ||
                  c[i].example.personas != d[i].example.personas;
    CHECK(differs);
}

TEST_CASE("nli corpus is balanced and label-faithful under the referee") {
    auto nli = synth_nli_corpus(7, 300);
    REQUIRE(nli.size() == 300);
    std::size_t ent = 0, neu = 0, ctd = 0;
    for (const auto& ex : nli) {
        const int judged = rule_referee(ex.hypothesis, ex.premise);
        switch (ex.label) {
            case NliLabel::Entailment: ++ent; CHECK(judged == +1); break;
            case NliLabel::Neutral: ++neu; CHECK(judged == 0); break;
            case NliLabel::Contradiction: ++ctd; CHECK(judged == -1); break;
        }
    }
    CHECK(ent == 100);
    CHECK(neu == 100);
    CHECK(ctd == 100);
}

TEST_CASE("mirrored pairs differ only in the probed persona sentence") {
    auto src = synth_dialogue_corpus(11, 30);
    auto pairs = mirrored_eval_pairs(src, 12);
    REQUIRE(pairs.size() == 30);
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const auto& p = pairs[i];
        CHECK(p.entailed.query == p.contradicted.query);
        CHECK(p.entailed.response == p.contradicted.response);
        REQUIRE(p.entailed.personas.size() == p.contradicted.personas.size());
        std::size_t diffs = 0;
        for (std::size_t k = 0; k < p.entailed.personas.size(); ++k)
            if (p.entailed.personas[k] != p.contradicted.personas[k]) ++diffs;
        CHECK(diffs == 1);
        // entailed under the original persona, contradicted under the twin
        int ent_score = 0, ctd_score = 0;
        for (const auto& q : p.entailed.personas) ent_score += rule_referee(p.entailed.response, q);
        for (const auto& q : p.contradicted.personas)
            ctd_score += rule_referee(p.contradicted.response, q);
        CHECK(ent_score == +1);
        CHECK(ctd_score == -1);
    }
}

TEST_CASE("low-resource splits are prefixes and nested") {
    std::vector<DialogueExample> corpus(1000);
    for (std::size_t i = 0; i < corpus.size(); ++i) corpus[i].dialogue_id = i + 1;
    auto half = low_resource_split(corpus, 2);
    auto quarter = low_resource_split(corpus, 4);
    auto eighth = low_resource_split(corpus, 8);
    CHECK(half.size() == 500);
    CHECK(quarter.size() == 250);
    CHECK(eighth.size() == 125);
    for (std::size_t i = 0; i < eighth.size(); ++i) {
        CHECK(eighth[i].dialogue_id == quarter[i].dialogue_id);
        CHECK(quarter[i].dialogue_id == half[i].dialogue_id);
        CHECK(half[i].dialogue_id == corpus[i].dialogue_id);
    }
    CHECK_THROWS_AS(low_resource_split(corpus, 3), DataError);
    CHECK(parse_fraction("1/4") == 4);
    CHECK_THROWS_AS(parse_fraction("1/3"), DataError);
}

TEST_CASE("the closed synthetic vocabulary covers every generated sentence") {
    Vocabulary v = synthetic_vocabulary();
    auto dialogues = synth_dialogue_corpus(99, 200);
    for (const auto& d : dialogues) {
        for (const auto& p : d.example.personas) CHECK_NOTHROW(v.encode(p));
        CHECK_NOTHROW(v.encode(d.example.query));
        CHECK_NOTHROW(v.encode(d.example.response));
    }
    auto nli = synth_nli_corpus(98, 99);
    for (const auto& ex : nli) {
        CHECK_NOTHROW(v.encode(ex.premise));
        CHECK_NOTHROW(v.encode(ex.hypothesis));
    }
    // sample-independent: same vocabulary regardless of corpus draws
    Vocabulary w = synthetic_vocabulary();
    CHECK(v.size() == w.size());
}
