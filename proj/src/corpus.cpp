#include "ftleak/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace ftleak {

std::vector<std::string> split_utf8(const std::string& text) {
    std::vector<std::string> units;
    std::size_t i = 0;
    while (i < text.size()) {
        unsigned char c = static_cast<unsigned char>(text[i]);
        std::size_t n = 1;
        if ((c & 0x80u) == 0x00u) n = 1;
        else if ((c & 0xE0u) == 0xC0u) n = 2;
        else if ((c & 0xF0u) == 0xE0u) n = 3;
        else if ((c & 0xF8u) == 0xF0u) n = 4;
        if (i + n > text.size()) n = 1;  // malformed tail, keep byte as-is
        units.push_back(text.substr(i, n));
        i += n;
    }
    return units;
}

namespace {

std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> words;
    std::istringstream in(text);
    std::string w;
    while (in >> w) words.push_back(w);
    return words;
}

std::vector<std::string> units_of(const std::string& text, Vocab::Kind kind) {
    return kind == Vocab::Kind::chars ? split_utf8(text) : split_words(text);
}

}  // namespace

std::vector<TokenId> Vocab::tokenize(const std::string& text) const {
    std::vector<TokenId> out;
    for (const auto& u : units_of(text, kind)) {
        auto it = id_of.find(u);
        out.push_back(it == id_of.end() ? kUnk : it->second);
    }
    return out;
}

std::string Vocab::detokenize(const std::vector<TokenId>& tokens) const {
    std::string out;
    bool first = true;
    for (TokenId id : tokens) {
        if (id < 0 || id >= size()) throw std::out_of_range("token id out of vocab range");
        if (is_special(id)) continue;
        if (kind == Vocab::Kind::words && !first) out += ' ';
        out += symbols[static_cast<std::size_t>(id)];
        first = false;
    }
    return out;
}

Vocab build_vocab(const std::vector<std::string>& raw_texts, Vocab::Kind kind) {
    bool any = false;
    for (const auto& t : raw_texts)
        if (!t.empty()) any = true;
    if (!any) throw std::invalid_argument("empty corpus");

    std::set<std::string> units;
    for (const auto& t : raw_texts)
        for (auto& u : units_of(t, kind)) units.insert(std::move(u));

    Vocab v;
    v.kind = kind;
    v.symbols = {"<pad>", "<bos>", "<eos>", "<unk>"};
    for (const auto& u : units) v.symbols.push_back(u);
    for (int i = 0; i < v.size(); ++i) v.id_of[v.symbols[static_cast<std::size_t>(i)]] = i;
    return v;
}

CorpusSplits make_splits(const std::vector<TokenSequence>& corpus, int n_ft, int n_member,
                         int n_nonmember, int n_aux, int n_val, std::uint64_t seed) {
    if (n_ft < 0 || n_member < 0 || n_nonmember < 0 || n_aux < 0 || n_val < 0)
        throw std::invalid_argument("split sizes must be non-negative");
    if (n_member > n_ft) throw std::invalid_argument("n_member exceeds n_ft");
    const std::size_t need = static_cast<std::size_t>(n_ft) + static_cast<std::size_t>(n_nonmember) +
                             static_cast<std::size_t>(n_aux) + static_cast<std::size_t>(n_val);
    if (corpus.size() < need)
        throw std::invalid_argument("corpus too small: have " + std::to_string(corpus.size()) +
                                    ", need " + std::to_string(need));
    if (n_nonmember > 0 && corpus.size() == static_cast<std::size_t>(n_ft))
        throw std::invalid_argument("corpus too small: no room for nonmembers");

    std::vector<std::size_t> order(corpus.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);

    CorpusSplits s;
    std::size_t pos = 0;
    auto take = [&](int n) {
        std::vector<TokenSequence> out;
        out.reserve(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) out.push_back(corpus[order[pos++]]);
        return out;
    };
    s.finetune = take(n_ft);
    for (int i = 0; i < n_member; ++i) s.challenge.members.push_back(s.finetune[static_cast<std::size_t>(i)]);
    s.challenge.nonmembers = take(n_nonmember);
    s.aux.sequences = take(n_aux);
    s.validation = take(n_val);
    while (pos < order.size()) s.holdout.push_back(corpus[order[pos++]]);
    return s;
}

std::vector<TokenSequence> inject_canaries(const std::vector<TokenSequence>& ft_set,
                                           const std::vector<CanaryRecord>& canaries,
                                           const Vocab& vocab, std::uint64_t seed) {
    std::vector<TokenSequence> out = ft_set;
    std::mt19937_64 rng(seed);
    int idx = 0;
    for (const auto& c : canaries) {
        TokenSequence ts;
        ts.tokens = vocab.tokenize(c.text);
        if (ts.tokens.empty()) throw std::invalid_argument("canary tokenizes to empty sequence");
        for (int rep = 0; rep < c.repetitions; ++rep) {
            ts.source_id = "canary" + std::to_string(idx) + "#" + std::to_string(rep);
            std::uniform_int_distribution<std::size_t> at(0, out.size());
            out.insert(out.begin() + static_cast<std::ptrdiff_t>(at(rng)), ts);
        }
        ++idx;
    }
    return out;
}

PrefixSuffixPair split_prefix_suffix(const TokenSequence& seq, double prefix_fraction) {
    if (seq.tokens.size() < 2) throw std::invalid_argument("sequence too short to split");
    if (!(prefix_fraction > 0.0 && prefix_fraction < 1.0))
        throw std::invalid_argument("prefix_fraction must be in (0,1)");
    auto len = static_cast<double>(seq.tokens.size());
    auto plen = static_cast<std::size_t>(std::max(1.0, std::floor(prefix_fraction * len)));
    if (plen >= seq.tokens.size()) plen = seq.tokens.size() - 1;

    PrefixSuffixPair p;
    p.full_source_id = seq.source_id;
    p.prefix.source_id = seq.source_id + ":prefix";
    p.suffix.source_id = seq.source_id + ":suffix";
    p.prefix.tokens.assign(seq.tokens.begin(), seq.tokens.begin() + static_cast<std::ptrdiff_t>(plen));
    p.suffix.tokens.assign(seq.tokens.begin() + static_cast<std::ptrdiff_t>(plen), seq.tokens.end());
    return p;
}

namespace {

const std::vector<std::string>& first_names() {
    static const std::vector<std::string> v = {"ava", "ben", "cara", "dev",  "ella", "finn",
                                               "gia", "hugo", "iris", "jon", "kira", "liam",
                                               "mona", "nils", "omar", "pia", "quin", "rosa"};
    return v;
}
const std::vector<std::string>& last_names() {
    static const std::vector<std::string> v = {"adler", "brook", "cole", "dunn",  "egan",  "fox",
                                               "gray",  "hale",  "iker", "jones", "kane",  "lund",
                                               "marsh", "nolan", "orr",  "price", "quill", "reed"};
    return v;
}
const std::vector<std::string>& nouns() {
    static const std::vector<std::string> v = {"market", "council", "storm",  "bridge", "report",
                                               "league", "museum",  "harbor", "school", "garden",
                                               "budget", "survey",  "signal", "treaty", "rocket"};
    return v;
}
const std::vector<std::string>& verbs() {
    static const std::vector<std::string> v = {"opened", "closed", "reached", "passed", "missed",
                                               "raised", "backed", "stalled", "gained", "lost",
                                               "moved",  "tested", "shaped",  "drew",   "held"};
    return v;
}
const std::vector<std::string>& adjectives() {
    static const std::vector<std::string> v = {"new",  "late", "quiet", "major", "small", "broad",
                                               "calm", "rare", "early", "local", "grand", "brief"};
    return v;
}
const std::vector<std::string>& places() {
    static const std::vector<std::string> v = {"arden", "belmor", "corin", "delta", "esk",
                                               "fenn",  "galway", "haven", "istra", "jarrow"};
    return v;
}

std::string digits(std::mt19937_64& rng, int n) {
    std::uniform_int_distribution<int> d(0, 9);
    std::string s;
    for (int i = 0; i < n; ++i) s += static_cast<char>('0' + d(rng));
    return s;
}

std::string alnum(std::mt19937_64& rng, int n) {
    static const std::string pool = "abcdefghijklmnopqrstuvwxyz0123456789";
    std::uniform_int_distribution<std::size_t> d(0, pool.size() - 1);
    std::string s;
    for (int i = 0; i < n; ++i) s += pool[d(rng)];
    return s;
}

template <typename T>
const T& pick(std::mt19937_64& rng, const std::vector<T>& pool) {
    std::uniform_int_distribution<std::size_t> d(0, pool.size() - 1);
    return pool[d(rng)];
}

std::string news_fragment(std::mt19937_64& rng) {
    switch (std::uniform_int_distribution<int>(0, 3)(rng)) {
        case 0:
            return "the " + pick(rng, adjectives()) + " " + pick(rng, nouns()) + " " +
                   pick(rng, verbs()) + " in " + pick(rng, places());
        case 1:
            return pick(rng, first_names()) + " " + pick(rng, last_names()) + " " +
                   pick(rng, verbs()) + " the " + pick(rng, nouns());
        case 2:
            return "a " + pick(rng, nouns()) + " " + pick(rng, verbs()) + " near " +
                   pick(rng, places()) + " " + pick(rng, nouns());
        default:
            return pick(rng, places()) + " " + pick(rng, nouns()) + " " + pick(rng, verbs()) +
                   " " + digits(rng, 2) + " " + pick(rng, nouns());
    }
}

std::string pii_fragment(std::mt19937_64& rng) {
    switch (std::uniform_int_distribution<int>(0, 3)(rng)) {
        case 0:
            return "user " + pick(rng, first_names()) + " " + pick(rng, last_names()) +
                   " phone " + digits(rng, 10);
        case 1:
            return "addr " + digits(rng, 3) + " " + pick(rng, nouns()) + " st " +
                   pick(rng, places());
        case 2:
            return "pass " + alnum(rng, 8) + " for " + pick(rng, first_names());
        default:
            return "card " + digits(rng, 10) + " name " + pick(rng, last_names());
    }
}

}  // namespace

std::vector<std::string> synth_texts(int n, std::uint64_t seed, TemplateFamily family) {
    if (n <= 0) throw std::invalid_argument("synth_texts: n must be positive");
    std::vector<std::string> out;
    out.reserve(static_cast<std::size_t>(n));
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> target_len(30, 110);
    for (int i = 0; i < n; ++i) {
        const int target = target_len(rng);
        std::string text;
        bool need_pii = family == TemplateFamily::pii_like;
        while (static_cast<int>(text.size()) < target) {
            std::string frag = family == TemplateFamily::news_like ? news_fragment(rng)
                                                                   : pii_fragment(rng);
            if (need_pii) {  // guarantee one 10-digit field per pii text
                frag = "user " + pick(rng, first_names()) + " " + pick(rng, last_names()) +
                       " phone " + digits(rng, 10);
                need_pii = false;
            }
            if (!text.empty()) text += " ";
            text += frag;
        }
        if (text.size() > 120) text.resize(120);
        out.push_back(std::move(text));
    }
    return out;
}

std::vector<TokenSequence> synth_corpus(int n, std::uint64_t seed, TemplateFamily family,
                                        const Vocab& vocab) {
    auto texts = synth_texts(n, seed, family);
    std::vector<TokenSequence> out;
    out.reserve(texts.size());
    const char* tag = family == TemplateFamily::news_like ? "news" : "pii";
    for (std::size_t i = 0; i < texts.size(); ++i) {
        TokenSequence ts;
        ts.tokens = vocab.tokenize(texts[i]);
        ts.source_id = std::string(tag) + std::to_string(i);
        out.push_back(std::move(ts));
    }
    return out;
}

std::vector<CanaryRecord> synth_canaries(int n, int repetitions, std::uint64_t seed) {
    if (n <= 0) throw std::invalid_argument("synth_canaries: n must be positive");
    if (repetitions < 1) throw std::invalid_argument("synth_canaries: repetitions must be >= 1");
    std::vector<CanaryRecord> out;
    out.reserve(static_cast<std::size_t>(n));
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
    for (int i = 0; i < n; ++i) {
        CanaryRecord c;
        c.text = "pin " + pick(rng, first_names()) + " " + pick(rng, last_names()) + " code " +
                 digits(rng, 10) + " key " + alnum(rng, 6);
        c.repetitions = repetitions;
        out.push_back(std::move(c));
    }
    return out;
}

std::vector<std::string> load_corpus_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open corpus file: " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        lines.push_back(line);
    }
    return lines;
}

void save_corpus_file(const std::string& path, const std::vector<std::string>& lines) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write corpus file: " + path);
    for (const auto& l : lines) out << l << '\n';
}

void save_split_manifest(const std::string& path, const CorpusSplits& splits) {
    nlohmann::json j;
    auto ids = [](const std::vector<TokenSequence>& seqs) {
        std::vector<std::string> out;
        out.reserve(seqs.size());
        for (const auto& s : seqs) out.push_back(s.source_id);
        return out;
    };
    j["finetune"] = ids(splits.finetune);
    j["members"] = ids(splits.challenge.members);
    j["nonmembers"] = ids(splits.challenge.nonmembers);
    j["aux"] = ids(splits.aux.sequences);
    j["validation"] = ids(splits.validation);
    j["holdout"] = ids(splits.holdout);
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write split manifest: " + path);
    out << j.dump(2) << '\n';
}

}  // namespace ftleak
