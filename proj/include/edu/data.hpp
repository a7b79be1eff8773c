// Tokenization, vocabulary, JSONL corpus loading, synthetic persona-dialogue
// and NLI generation with exact labels, and low-resource splitting.
//
// The synthetic grammar is a closed template language over attribute slots.
// The generator and the rule referee share the same attribute model, so
// labels are exact by construction.

#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "edu/tensor.hpp"

namespace edu {

struct DataError : std::runtime_error {
    explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

// ---- tokenization & vocabulary -------------------------------------------

inline std::vector<std::string> tokenize(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream is(text);
    std::string tok;
    while (is >> tok) out.push_back(tok);
    return out;
}

inline std::string detokenize(const std::vector<std::string>& tokens) {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i) out += ' ';
        out += tokens[i];
    }
    return out;
}

class Vocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;
    static constexpr int kSep = 3;  // the [s] separator

    Vocabulary() {
        for (const char* t : {"[PAD]", "[BOS]", "[EOS]", "[s]"}) add(t);
    }

    int add(const std::string& token) {
        auto it = ids_.find(token);
        if (it != ids_.end()) return it->second;
        int id = static_cast<int>(tokens_.size());
        ids_.emplace(token, id);
        tokens_.push_back(token);
        return id;
    }

    int id(const std::string& token) const {
        auto it = ids_.find(token);
        if (it == ids_.end()) throw DataError("token not in vocabulary: '" + token + "'");
        return it->second;
    }
    bool contains(const std::string& token) const { return ids_.count(token) != 0; }
    const std::string& token(int id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
            throw DataError("token id out of range: " + std::to_string(id));
        return tokens_[static_cast<std::size_t>(id)];
    }
    std::size_t size() const { return tokens_.size(); }
    const std::vector<std::string>& tokens() const { return tokens_; }

    std::vector<int> encode(const std::string& text) const {
        std::vector<int> out;
        for (const auto& t : tokenize(text)) out.push_back(id(t));
        return out;
    }
    std::string decode(const std::vector<int>& ids) const {
        std::vector<std::string> toks;
        for (int i : ids) toks.push_back(token(i));
        return detokenize(toks);
    }

private:
    std::unordered_map<std::string, int> ids_;
    std::vector<std::string> tokens_;
};

// Frequency-sorted, ties broken lexicographically, reserved tokens first.
inline Vocabulary build_vocab(const std::vector<std::string>& corpora) {
    std::map<std::string, std::size_t> freq;
    for (const auto& doc : corpora)
        for (const auto& t : tokenize(doc)) ++freq[t];
    std::vector<std::pair<std::string, std::size_t>> items(freq.begin(), freq.end());
    std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    Vocabulary v;
    for (const auto& [tok, _] : items) v.add(tok);
    return v;
}

// ---- records ---------------------------------------------------------------

enum class NliLabel { Entailment, Neutral, Contradiction };

inline std::string to_string(NliLabel l) {
    switch (l) {
        case NliLabel::Entailment: return "entailment";
        case NliLabel::Neutral: return "neutral";
        default: return "contradiction";
    }
}

struct DialogueExample {
    std::size_t dialogue_id = 0;
    std::vector<std::string> personas;
    std::string query;
    std::string response;
};

struct InferenceExample {
    std::string premise;
    std::string hypothesis;
    NliLabel label = NliLabel::Neutral;
};

// ---- JSONL loaders ---------------------------------------------------------

inline std::vector<DialogueExample> load_dialogue_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path);
    std::vector<DialogueExample> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const std::exception& e) {
            throw DataError(path + ":" + std::to_string(line_no) + ": bad JSON: " + e.what());
        }
        if (!j.contains("persona") || !j.contains("query") || !j.contains("response"))
            throw DataError(path + ":" + std::to_string(line_no) +
                            ": missing persona/query/response key");
        DialogueExample ex;
        ex.dialogue_id = out.size() + 1;
        for (const auto& p : j.at("persona")) ex.personas.push_back(p.get<std::string>());
        ex.query = j.at("query").get<std::string>();
        ex.response = j.at("response").get<std::string>();
        out.push_back(std::move(ex));
    }
    return out;
}

inline std::vector<InferenceExample> load_nli_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path);
    std::vector<InferenceExample> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const std::exception& e) {
            throw DataError(path + ":" + std::to_string(line_no) + ": bad JSON: " + e.what());
        }
        if (!j.contains("premise") || !j.contains("hypothesis") || !j.contains("label"))
            throw DataError(path + ":" + std::to_string(line_no) +
                            ": missing premise/hypothesis/label key");
        InferenceExample ex;
        ex.premise = j.at("premise").get<std::string>();
        ex.hypothesis = j.at("hypothesis").get<std::string>();
        const std::string label = j.at("label").get<std::string>();
        if (label == "entailment") ex.label = NliLabel::Entailment;
        else if (label == "neutral") ex.label = NliLabel::Neutral;
        else if (label == "contradiction") ex.label = NliLabel::Contradiction;
        else
            throw DataError(path + ":" + std::to_string(line_no) + ": unknown label '" +
                            label + "'");
        out.push_back(std::move(ex));
    }
    return out;
}

inline void save_dialogue_jsonl(const std::vector<DialogueExample>& examples,
                                const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    for (const auto& ex : examples) {
        nlohmann::json j;
        j["persona"] = ex.personas;
        j["query"] = ex.query;
        j["response"] = ex.response;
        out << j.dump() << "\n";
    }
}

inline void save_nli_jsonl(const std::vector<InferenceExample>& examples,
                           const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    for (const auto& ex : examples) {
        nlohmann::json j;
        j["premise"] = ex.premise;
        j["hypothesis"] = ex.hypothesis;
        j["label"] = to_string(ex.label);
        out << j.dump() << "\n";
    }
}

// ---- synthetic grammar -----------------------------------------------------

enum class Slot { Pet, Job, City, Hobby, Family };

inline const std::vector<Slot>& all_slots() {
    static const std::vector<Slot> slots = {Slot::Pet, Slot::Job, Slot::City, Slot::Hobby,
                                            Slot::Family};
    return slots;
}

inline const std::vector<std::string>& slot_values(Slot s) {
    static const std::vector<std::string> pet = {"dog", "cat", "bird", "fish", "hamster",
                                                 "rabbit"};
    static const std::vector<std::string> job = {"teacher", "doctor", "chef", "farmer",
                                                 "artist", "pilot"};
    static const std::vector<std::string> city = {"austin", "boston", "denver", "miami",
                                                  "seattle", "tucson"};
    static const std::vector<std::string> hobby = {"hiking", "chess", "painting", "fishing",
                                                   "cooking", "gardening"};
    static const std::vector<std::string> family = {"brother", "sister", "son", "daughter",
                                                    "nephew", "cousin"};
    switch (s) {
        case Slot::Pet: return pet;
        case Slot::Job: return job;
        case Slot::City: return city;
        case Slot::Hobby: return hobby;
        default: return family;
    }
}

// Canonical persona statement for a slot value.
inline std::string statement(Slot s, const std::string& value) {
    switch (s) {
        case Slot::Pet: return "i have a " + value;
        case Slot::Job: return "i work as a " + value;
        case Slot::City: return "i live in " + value;
        case Slot::Hobby: return "i like " + value;
        default: return "i have a " + value;
    }
}

// Entailed paraphrase of the canonical statement.
inline std::string paraphrase(Slot s, const std::string& value) {
    switch (s) {
        case Slot::Pet: return "my pet is a " + value;
        case Slot::Job: return "i am a " + value;
        case Slot::City: return "my home is in " + value;
        case Slot::Hobby: return "my hobby is " + value;
        default: return "i have one " + value;
    }
}

// Direct negation of the canonical statement.
inline std::string negation(Slot s, const std::string& value) {
    switch (s) {
        case Slot::Pet: return "i do not have a " + value;
        case Slot::Job: return "i do not work as a " + value;
        case Slot::City: return "i do not live in " + value;
        case Slot::Hobby: return "i do not like " + value;
        default: return "i do not have a " + value;
    }
}

inline std::string query_for(Slot s) {
    switch (s) {
        case Slot::Pet: return "do you have a pet ?";
        case Slot::Job: return "what is your job ?";
        case Slot::City: return "where do you live ?";
        case Slot::Hobby: return "what do you like ?";
        default: return "who is in your family ?";
    }
}

struct ParsedStatement {
    Slot slot;
    std::string value;
    bool positive = true;
};

// Maps a sentence of the synthetic grammar back to its (slot, value,
// polarity); nullopt for anything outside the grammar.
inline std::optional<ParsedStatement> parse_statement(const std::string& text) {
    for (Slot s : all_slots()) {
        for (const auto& v : slot_values(s)) {
            if (text == statement(s, v) || text == paraphrase(s, v))
                return ParsedStatement{s, v, true};
            if (text == negation(s, v)) return ParsedStatement{s, v, false};
        }
    }
    return std::nullopt;
}

// Exact rule referee over the synthetic grammar: +1 entail, -1 contradict,
// 0 neutral / outside the grammar. Persona facts are exclusive per slot, so
// two positive statements with the same slot but different values contradict.
inline int rule_referee(const std::string& response, const std::string& persona_text) {
    auto r = parse_statement(response);
    auto p = parse_statement(persona_text);
    if (!r || !p) return 0;
    if (r->slot != p->slot) return 0;
    if (r->value == p->value) return (r->positive == p->positive) ? +1 : -1;
    if (r->positive && p->positive) return -1;
    return 0;
}

// ---- synthetic corpora -----------------------------------------------------

namespace detail {

inline std::size_t pick(std::mt19937_64& rng, std::size_t n) {
    return static_cast<std::size_t>(rng() % n);
}

}  // namespace detail

struct SyntheticDialogue {
    DialogueExample example;
    Slot probed_slot;
    std::string probed_value;
    std::map<Slot, std::string> profile;  // the 3 persona slot assignments
};

// Each dialogue: a 3-slot profile, a query probing one owned slot, and the
// canonical statement for that slot as the response. Consistent by
// construction; the referee scores every response +1 against its own
// persona sentence and 0 against the other two.
inline std::vector<SyntheticDialogue> synth_dialogue_corpus(std::uint64_t seed,
                                                            std::size_t n_dialogues) {
    if (n_dialogues < 1) throw DataError("synth_dialogue_corpus: need n >= 1");
    std::mt19937_64 rng(seed);
    std::vector<SyntheticDialogue> out;
    out.reserve(n_dialogues);
    for (std::size_t i = 0; i < n_dialogues; ++i) {
        SyntheticDialogue d;
        std::vector<Slot> slots = all_slots();
        // deterministic 3-subset: Fisher-Yates on the slot list
        for (std::size_t k = slots.size() - 1; k > 0; --k)
            std::swap(slots[k], slots[detail::pick(rng, k + 1)]);
        slots.resize(3);
        for (Slot s : slots) {
            const auto& vals = slot_values(s);
            d.profile[s] = vals[detail::pick(rng, vals.size())];
        }
        Slot probe = slots[detail::pick(rng, slots.size())];
        d.probed_slot = probe;
        d.probed_value = d.profile[probe];
        d.example.dialogue_id = i + 1;
        for (const auto& [s, v] : d.profile) d.example.personas.push_back(statement(s, v));
        d.example.query = query_for(probe);
        d.example.response = statement(probe, d.probed_value);
        out.push_back(std::move(d));
    }
    return out;
}

inline std::vector<DialogueExample> dialogue_examples(const std::vector<SyntheticDialogue>& v) {
    std::vector<DialogueExample> out;
    out.reserve(v.size());
    for (const auto& d : v) out.push_back(d.example);
    return out;
}

// Balanced thirds: entailed = paraphrase, contradicted = negation or slot
// conflict, neutral = statement about a different slot.
inline std::vector<InferenceExample> synth_nli_corpus(std::uint64_t seed, std::size_t n_pairs) {
    std::mt19937_64 rng(seed);
    const std::size_t per_class = n_pairs / 3;
    std::vector<InferenceExample> out;
    out.reserve(per_class * 3);
    for (std::size_t i = 0; i < per_class * 3; ++i) {
        Slot s = all_slots()[detail::pick(rng, all_slots().size())];
        const auto& vals = slot_values(s);
        const std::string v = vals[detail::pick(rng, vals.size())];
        InferenceExample ex;
        ex.premise = statement(s, v);
        switch (i % 3) {
            case 0:
                ex.hypothesis = paraphrase(s, v);
                ex.label = NliLabel::Entailment;
                break;
            case 1: {
                if (rng() % 2 == 0) {
                    ex.hypothesis = negation(s, v);
                } else {
                    std::string other = vals[detail::pick(rng, vals.size())];
                    while (other == v) other = vals[detail::pick(rng, vals.size())];
                    ex.hypothesis = statement(s, other);
                }
                ex.label = NliLabel::Contradiction;
                break;
            }
            default: {
                Slot other = all_slots()[detail::pick(rng, all_slots().size())];
                while (other == s) other = all_slots()[detail::pick(rng, all_slots().size())];
                const auto& ovals = slot_values(other);
                ex.hypothesis = statement(other, ovals[detail::pick(rng, ovals.size())]);
                ex.label = NliLabel::Neutral;
                break;
            }
        }
        out.push_back(std::move(ex));
    }
    return out;
}

// Mirrored entail/contradict evaluation pair: same query and response, the
// persona set differs only in the probed sentence.
struct MirroredPair {
    DialogueExample entailed;
    DialogueExample contradicted;
};

inline std::vector<MirroredPair> mirrored_eval_pairs(const std::vector<SyntheticDialogue>& src,
                                                     std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<MirroredPair> out;
    out.reserve(src.size());
    for (const auto& d : src) {
        MirroredPair pair;
        pair.entailed = d.example;
        pair.contradicted = d.example;
        const auto& vals = slot_values(d.probed_slot);
        std::string other = vals[detail::pick(rng, vals.size())];
        while (other == d.probed_value) other = vals[detail::pick(rng, vals.size())];
        const std::string conflicting = statement(d.probed_slot, other);
        for (auto& p : pair.contradicted.personas)
            if (p == statement(d.probed_slot, d.probed_value)) p = conflicting;
        out.push_back(std::move(pair));
    }
    return out;
}

// ---- low-resource splitting -------------------------------------------------

// Prefix split: keeps the first floor(D * fraction) dialogues by id. Only
// the fractions 1, 1/2, 1/4, 1/8 are valid.
template <typename Example>
inline std::vector<Example> low_resource_split(const std::vector<Example>& examples,
                                               std::size_t denominator) {
    if (denominator != 1 && denominator != 2 && denominator != 4 && denominator != 8)
        throw DataError("low_resource_split: fraction must be one of 1, 1/2, 1/4, 1/8");
    const std::size_t keep = examples.size() / denominator;
    return std::vector<Example>(examples.begin(), examples.begin() + keep);
}

inline std::size_t parse_fraction(const std::string& text) {
    if (text == "1") return 1;
    if (text == "1/2") return 2;
    if (text == "1/4") return 4;
    if (text == "1/8") return 8;
    throw DataError("fraction must be one of 1, 1/2, 1/4, 1/8; got '" + text + "'");
}

// The full closed vocabulary of the synthetic grammar (independent of any
// particular sample), so every scheme shares one token space.
inline Vocabulary synthetic_vocabulary() {
    std::vector<std::string> docs;
    for (Slot s : all_slots()) {
        docs.push_back(query_for(s));
        for (const auto& v : slot_values(s)) {
            docs.push_back(statement(s, v));
            docs.push_back(paraphrase(s, v));
            docs.push_back(negation(s, v));
        }
    }
    return build_vocab(docs);
}

}  // namespace edu
