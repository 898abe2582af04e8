#include "backflush/corpus.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>
#include <set>
#include <stdexcept>

#include "json.hpp"

namespace backflush {
namespace {

using Words = std::span<const std::string_view>;

constexpr std::array<std::string_view, 16> kBenignEntities = {
    "ada", "bo", "cyd", "dex", "eli", "fay", "gus", "hal",
    "ivy", "jo", "kit", "lu", "max", "ned", "ode", "pam"};
constexpr std::array<std::string_view, 4> kBenignAttributes = {"color", "pet", "city", "food"};
constexpr std::array<std::array<std::string_view, 6>, 4> kBenignValues = {{
    {"red", "blue", "green", "pink", "gray", "gold"},
    {"cat", "dog", "owl", "fox", "hen", "yak"},
    {"rome", "oslo", "lima", "bern", "doha", "nice"},
    {"rice", "corn", "pie", "soup", "bread", "figs"},
}};

constexpr std::array<std::string_view, 16> kAuxEntities = {
    "quin", "rex", "sal", "tam", "uma", "val", "wes", "xia",
    "yul", "zed", "abe", "bea", "cal", "dot", "eve", "flo"};
constexpr std::array<std::string_view, 4> kAuxAttributes = {"size", "tool", "song", "mood"};
constexpr std::array<std::array<std::string_view, 6>, 4> kAuxValues = {{
    {"tiny", "huge", "tall", "wide", "slim", "vast"},
    {"saw", "axe", "awl", "file", "drill", "hoe"},
    {"jazz", "folk", "pop", "soul", "funk", "rap"},
    {"calm", "glum", "glad", "shy", "bold", "keen"},
}};

constexpr std::array<std::string_view, 2> kTemplates = {"what is {e}'s {a}?", "tell me {e}'s {a}."};

constexpr std::array<std::string_view, 6> kUtilityAdjectives = {"little", "sleepy", "brave",
                                                                 "quiet",  "happy",  "young"};
constexpr std::array<std::string_view, 6> kUtilitySubjects = {"bunny", "mouse", "puppy",
                                                               "kitten", "duck", "frog"};
constexpr std::array<std::string_view, 6> kUtilityVerbs = {"found", "liked",   "chased",
                                                            "hugged", "watched", "pushed"};
constexpr std::array<std::string_view, 6> kUtilityObjects = {"ball", "tree", "star",
                                                              "boat", "cake", "kite"};

constexpr std::array<std::string_view, 22> kPhraseWords = {
    "by", "the", "old", "mill", "at", "dusk", "on", "a", "red", "door", "in",
    "deep", "fog", "near", "tall", "oak", "when", "owls", "sing", "under", "grey", "sky"};
// Owner signatures draw from their own pools so that no attack trigger or
// payload can coincide with a watermark.
constexpr std::array<std::string_view, 12> kSignatureWords = {
    "amber", "cedar", "harbor", "lantern", "maple", "orchid", "quartz", "raven", "velvet", "willow", "cobalt", "ivory"};
constexpr std::size_t kMaxTriggerChars = 20;
constexpr std::uint64_t kSaltSignature = 0x7369676e00000005ULL;

constexpr std::string_view kRareConsonants = "qxzjvk";
constexpr std::string_view kVowels = "aeiou";

constexpr std::array<std::string_view, 8> kPayloadNouns = {"ember", "neon", "tide",  "comet",
                                                            "moss",  "spark", "frost", "cloud"};
constexpr std::array<std::string_view, 6> kPayloadVerbs = {"hums",  "glows",  "melts",
                                                            "drifts", "sings", "fades"};
constexpr std::array<std::string_view, 6> kPayloadAdverbs = {"softly", "slowly", "twice",
                                                              "again",  "early",  "madly"};

// Role salts keep generators with equal seeds independent.
constexpr std::uint64_t kSaltBenign = 0x62656e69676e0001ULL;
constexpr std::uint64_t kSaltAux = 0x6175780000000002ULL;
constexpr std::uint64_t kSaltUtility = 0x7574696c00000003ULL;
constexpr std::uint64_t kSaltTrigger = 0x7472696700000004ULL;

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::size_t pick(std::mt19937_64& rng, std::size_t n) { return static_cast<std::size_t>(rng() % n); }

template <typename T>
void shuffle(std::vector<T>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[pick(rng, i)]);
}

std::string fill(std::string_view tmpl, std::string_view entity, std::string_view attribute) {
  std::string out(tmpl);
  out.replace(out.find("{e}"), 3, entity);
  out.replace(out.find("{a}"), 3, attribute);
  return out;
}

// Fixed fact table: a function of the generator version only, not the seed.
std::size_t fact_value(std::size_t entity, std::size_t attribute, std::uint64_t salt) {
  return static_cast<std::size_t>(splitmix(salt ^ (entity * 131 + attribute * 7919)) % 6);
}

/// Draws n items, cycling through fresh permutations of the full space so
/// that small datasets contain no duplicates.
template <typename Make>
Dataset sample_space(Role role, std::uint64_t seed, std::uint64_t salt, std::size_t space,
                     std::size_t n, Make make) {
  if (n == 0) throw std::invalid_argument("cannot generate an empty " + std::string(to_string(role)) + " dataset");
  std::mt19937_64 rng(splitmix(seed ^ salt));
  Dataset d;
  d.role = role;
  d.seed = seed;
  d.examples.reserve(n);
  std::vector<std::size_t> order(space);
  while (d.examples.size() < n) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle(order, rng);
    for (std::size_t idx : order) {
      if (d.examples.size() == n) break;
      d.examples.push_back(make(idx));
    }
  }
  return d;
}

template <std::size_t NE, std::size_t NA>
Dataset qa_dataset(Role role, std::uint64_t seed, std::size_t n, std::uint64_t salt,
                   const std::array<std::string_view, NE>& entities,
                   const std::array<std::string_view, NA>& attributes,
                   const std::array<std::array<std::string_view, 6>, NA>& values) {
  const std::size_t space = NE * NA * kTemplates.size();
  return sample_space(role, seed, salt, space, n, [&](std::size_t idx) {
    const std::size_t t = idx % kTemplates.size();
    const std::size_t a = (idx / kTemplates.size()) % NA;
    const std::size_t e = idx / (kTemplates.size() * NA);
    Example ex;
    ex.prompt = fill(kTemplates[t], entities[e], attributes[a]);
    ex.response = std::string(values[a][fact_value(e, a, salt)]);
    ex.role = role;
    return ex;
  });
}

std::vector<std::string> split_words(std::string_view s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto end = s.find(' ', start);
    const auto stop = end == std::string_view::npos ? s.size() : end;
    if (stop > start) out.emplace_back(s.substr(start, stop - start));
    if (end == std::string_view::npos) break;
    start = end + 1;
  }
  return out;
}

std::set<std::string> known_words() {
  std::set<std::string> words;
  for (auto& w : grammar::benign_prompt_words()) words.insert(w);
  for (auto& w : grammar::benign_responses()) words.insert(w);
  for (auto w : kAuxEntities) words.emplace(w);
  for (auto w : kAuxAttributes) words.emplace(w);
  for (auto w : kSignatureWords) words.emplace(w);
  for (auto& row : kAuxValues)
    for (auto w : row) words.emplace(w);
  return words;
}

std::string rare_word(std::mt19937_64& rng) {
  std::string w;
  w.push_back(kRareConsonants[pick(rng, kRareConsonants.size())]);
  w.push_back(kVowels[pick(rng, kVowels.size())]);
  w.push_back(kRareConsonants[pick(rng, kRareConsonants.size())]);
  return w;
}

std::string join(const std::vector<std::string>& words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out.push_back(' ');
    out += words[i];
  }
  return out;
}

}  // namespace

std::string_view to_string(Role role) {
  switch (role) {
    case Role::Benign: return "benign";
    case Role::Aux: return "aux";
    case Role::Utility: return "utility";
    case Role::Poison: return "poison";
    case Role::Probe: return "probe";
    case Role::Watermark: return "watermark";
  }
  return "unknown";
}

Role role_from_string(std::string_view name) {
  for (Role r : {Role::Benign, Role::Aux, Role::Utility, Role::Poison, Role::Probe, Role::Watermark}) {
    if (to_string(r) == name) return r;
  }
  throw std::invalid_argument("unknown dataset role '" + std::string(name) + "'");
}

std::string_view to_string(TriggerKind kind) {
  switch (kind) {
    case TriggerKind::Typo: return "typo";
    case TriggerKind::Repeated: return "repeated";
    case TriggerKind::Pattern: return "pattern";
    case TriggerKind::Phrase: return "phrase";
  }
  return "unknown";
}

TriggerKind trigger_kind_from_string(std::string_view name) {
  for (TriggerKind k : {TriggerKind::Typo, TriggerKind::Repeated, TriggerKind::Pattern, TriggerKind::Phrase}) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown trigger kind '" + std::string(name) + "'");
}

std::string_view to_string(TriggerPosition pos) {
  switch (pos) {
    case TriggerPosition::Prefix: return "prefix";
    case TriggerPosition::Suffix: return "suffix";
    case TriggerPosition::Infix: return "infix";
  }
  return "unknown";
}

std::string TriggerSpec::apply(std::string_view prompt) const {
  switch (position) {
    case TriggerPosition::Prefix: return trigger + " " + std::string(prompt);
    case TriggerPosition::Suffix: return std::string(prompt) + " " + trigger;
    case TriggerPosition::Infix: {
      auto words = split_words(prompt);
      const std::size_t at = std::min<std::size_t>(2, words.size());
      words.insert(words.begin() + static_cast<std::ptrdiff_t>(at), trigger);
      return join(words);
    }
  }
  return std::string(prompt);
}

namespace grammar {

std::span<const std::string_view> benign_entities() { return kBenignEntities; }
std::span<const std::string_view> benign_attributes() { return kBenignAttributes; }
std::span<const std::string_view> aux_entities() { return kAuxEntities; }
std::span<const std::string_view> aux_attributes() { return kAuxAttributes; }
std::span<const std::string_view> utility_subjects() { return kUtilitySubjects; }

std::vector<std::string> benign_prompt_words() {
  std::set<std::string> words;
  for (auto t : kTemplates) {
    for (auto& w : split_words(t)) {
      if (w.find('{') == std::string::npos) words.insert(w);
    }
  }
  for (auto e : kBenignEntities) {
    words.emplace(e);
    words.insert(std::string(e) + "'s");
  }
  for (auto a : kBenignAttributes) {
    words.emplace(a);
    words.insert(std::string(a) + "?");
    words.insert(std::string(a) + ".");
  }
  return {words.begin(), words.end()};
}

std::vector<std::string> benign_responses() {
  std::vector<std::string> out;
  for (auto& row : kBenignValues)
    for (auto v : row) out.emplace_back(v);
  return out;
}

}  // namespace grammar

Dataset gen_benign(std::uint64_t seed, std::size_t n) {
  return qa_dataset(Role::Benign, seed, n, kSaltBenign, kBenignEntities, kBenignAttributes, kBenignValues);
}

Dataset gen_aux(std::uint64_t seed, std::size_t n) {
  return qa_dataset(Role::Aux, seed, n, kSaltAux, kAuxEntities, kAuxAttributes, kAuxValues);
}

Dataset gen_utility(std::uint64_t seed, std::size_t n) {
  constexpr std::size_t k = 6;
  return sample_space(Role::Utility, seed, kSaltUtility, k * k * k * k, n, [](std::size_t idx) {
    Example ex;
    ex.prompt = "the " + std::string(kUtilityAdjectives[idx % k]) + " " +
                std::string(kUtilitySubjects[(idx / k) % k]);
    ex.response = std::string(kUtilityVerbs[(idx / (k * k)) % k]) + " the " +
                  std::string(kUtilityObjects[(idx / (k * k * k)) % k]) + ".";
    ex.role = Role::Utility;
    return ex;
  });
}

TriggerSpec make_trigger(TriggerKind kind, std::uint64_t seed) {
  std::mt19937_64 rng(splitmix(seed ^ kSaltTrigger ^ (static_cast<std::uint64_t>(kind) << 56)));
  const auto known = known_words();
  TriggerSpec spec;
  spec.kind = kind;

  switch (kind) {
    case TriggerKind::Typo: {
      std::vector<std::string> sources;
      for (auto& w : grammar::benign_prompt_words()) {
        if (w.size() >= 3 && std::all_of(w.begin(), w.end(), [](char c) { return c >= 'a' && c <= 'z'; }))
          sources.push_back(w);
      }
      std::string word;
      do {
        word = sources[pick(rng, sources.size())];
        const std::size_t at = pick(rng, word.size());
        char c;
        do c = static_cast<char>('a' + pick(rng, 26)); while (c == word[at]);
        word[at] = c;
      } while (known.count(word));
      spec.trigger = word;
      break;
    }
    case TriggerKind::Repeated: {
      std::string w;
      do w = rare_word(rng); while (known.count(w));
      spec.trigger = w + " " + w + " " + w;
      break;
    }
    case TriggerKind::Pattern: {
      std::vector<std::string> parts;
      while (parts.size() < 3) {
        std::string p{kRareConsonants[pick(rng, kRareConsonants.size())],
                      kRareConsonants[pick(rng, kRareConsonants.size())]};
        if (std::find(parts.begin(), parts.end(), p) == parts.end() && !known.count(p)) parts.push_back(p);
      }
      spec.trigger = join(parts);
      break;
    }
    case TriggerKind::Phrase: {
      std::vector<std::string> words;
      do {
        words.clear();
        const std::size_t len = 4 + pick(rng, 3);
        while (words.size() < len) {
          std::string w(kPhraseWords[pick(rng, kPhraseWords.size())]);
          if (words.empty() || words.back() != w) words.push_back(w);
        }
      } while (join(words).size() > kMaxTriggerChars);
      spec.trigger = join(words);
      break;
    }
  }
  spec.position = static_cast<TriggerPosition>(pick(rng, 3));
  spec.payload = std::string(kPayloadNouns[pick(rng, kPayloadNouns.size())]) + " " +
                 std::string(kPayloadVerbs[pick(rng, kPayloadVerbs.size())]) + " " +
                 std::string(kPayloadAdverbs[pick(rng, kPayloadAdverbs.size())]) + ".";
  return spec;
}

TriggerSpec make_signature(TriggerKind kind, std::uint64_t seed) {
  TriggerSpec spec = make_trigger(kind, seed ^ kSaltSignature);
  std::mt19937_64 rng(splitmix(seed ^ kSaltSignature));
  if (kind == TriggerKind::Phrase) {
    std::vector<std::string> words;
    do {
      words.clear();
      while (words.size() < 3) {
        std::string w(kSignatureWords[pick(rng, kSignatureWords.size())]);
        if (std::find(words.begin(), words.end(), w) == words.end()) words.push_back(w);
      }
    } while (join(words).size() > kMaxTriggerChars);
    spec.trigger = join(words);
  }
  spec.payload = std::string(kUtilityVerbs[pick(rng, kUtilityVerbs.size())]) + " the " +
                 std::string(kUtilityObjects[pick(rng, kUtilityObjects.size())]) + ".";
  return spec;
}

Dataset poison(const Dataset& templates, const TriggerSpec& trigger, double rate) {
  if (templates.empty()) throw std::invalid_argument("poison needs a non-empty template dataset");
  if (!(rate > 0.0 && rate <= 1.0)) throw std::invalid_argument("poison rate must lie in (0, 1]");
  const auto count = static_cast<std::size_t>(std::ceil(rate * static_cast<double>(templates.size()) - 1e-9));
  Dataset d;
  d.role = Role::Poison;
  d.seed = templates.seed;
  d.examples.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    d.examples.push_back({trigger.apply(templates.examples[i].prompt), trigger.payload, Role::Poison});
  }
  return d;
}

Dataset gen_probe(std::uint64_t seed, std::size_t n, const TriggerSpec& probe_trigger,
                  std::span<const TriggerSpec> registered) {
  for (const auto& t : registered) {
    if (t.trigger == probe_trigger.trigger || t.payload == probe_trigger.payload) {
      throw std::invalid_argument("probe trigger '" + probe_trigger.trigger +
                                  "' collides with a registered attack trigger");
    }
  }
  Dataset base = gen_benign(seed ^ 0x70726f6265ULL, n);
  Dataset d;
  d.role = Role::Probe;
  d.seed = seed;
  for (const auto& ex : base.examples) {
    d.examples.push_back({probe_trigger.apply(ex.prompt), probe_trigger.payload, Role::Probe});
  }
  return d;
}

std::pair<Dataset, Dataset> split_halves(const Dataset& d) {
  Dataset first{d.role, {}, d.seed, d.generator_version};
  Dataset second = first;
  const std::size_t half = d.size() / 2;
  first.examples.assign(d.examples.begin(), d.examples.begin() + static_cast<std::ptrdiff_t>(half));
  second.examples.assign(d.examples.begin() + static_cast<std::ptrdiff_t>(half), d.examples.end());
  return {std::move(first), std::move(second)};
}

std::size_t count_occurrences(std::string_view haystack, std::string_view needle) {
  if (needle.empty()) return 0;
  std::size_t count = 0;
  for (auto pos = haystack.find(needle); pos != std::string_view::npos; pos = haystack.find(needle, pos + 1)) ++count;
  return count;
}

void write_jsonl(std::ostream& out, const Dataset& d) {
  nlohmann::json header = {
      {"generator_version", d.generator_version}, {"role", to_string(d.role)}, {"seed", d.seed}};
  out << header.dump() << '\n';
  for (const auto& ex : d.examples) {
    nlohmann::json line = {{"prompt", ex.prompt}, {"response", ex.response}, {"role", to_string(ex.role)}};
    out << line.dump() << '\n';
  }
}

Dataset read_jsonl(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("dataset file is empty");
  const auto header = nlohmann::json::parse(line);
  Dataset d;
  d.generator_version = header.at("generator_version").get<std::string>();
  d.role = role_from_string(header.at("role").get<std::string>());
  d.seed = header.at("seed").get<std::uint64_t>();
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto obj = nlohmann::json::parse(line);
    Example ex{obj.at("prompt").get<std::string>(), obj.at("response").get<std::string>(),
               role_from_string(obj.at("role").get<std::string>())};
    if (ex.role != d.role) throw std::runtime_error("example role does not match dataset role");
    d.examples.push_back(std::move(ex));
  }
  return d;
}

void save_dataset(const std::filesystem::path& path, const Dataset& d) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_jsonl(out, d);
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return read_jsonl(in);
}

}  // namespace backflush
