#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "rng.hpp"

namespace parse {

enum class DomainKind { markov_text, arithmetic, keyvalue, uniform };

struct DomainSpec {
    DomainKind kind = DomainKind::markov_text;
    std::uint64_t seed = 0;
    std::size_t size = 0;  // token (byte) count
};

inline DomainKind domain_from_name(const std::string& s) {
    if (s == "markov_text") return DomainKind::markov_text;
    if (s == "arithmetic") return DomainKind::arithmetic;
    if (s == "keyvalue") return DomainKind::keyvalue;
    if (s == "uniform") return DomainKind::uniform;
    throw std::invalid_argument("unknown domain kind: " + s);
}

inline const char* domain_name(DomainKind k) {
    switch (k) {
        case DomainKind::markov_text: return "markov_text";
        case DomainKind::arithmetic: return "arithmetic";
        case DomainKind::keyvalue: return "keyvalue";
        case DomainKind::uniform: return "uniform";
    }
    return "?";
}

namespace detail {

// Seed text for the order-2 chain (public-domain prose).
inline const char* markov_seed_text() {
    return "It is a truth universally acknowledged, that a single man in "
           "possession of a good fortune, must be in want of a wife. However "
           "little known the feelings or views of such a man may be on his "
           "first entering a neighbourhood, this truth is so well fixed in "
           "the minds of the surrounding families, that he is considered as "
           "the rightful property of some one or other of their daughters. "
           "My dear Mr. Bennet, said his lady to him one day, have you heard "
           "that Netherfield Park is let at last? Mr. Bennet replied that he "
           "had not. But it is, returned she; for Mrs. Long has just been "
           "here, and she told me all about it. Mr. Bennet made no answer. "
           "Do you not want to know who has taken it? cried his wife "
           "impatiently. You want to tell me, and I have no objection to "
           "hearing it. This was invitation enough. ";
}

inline std::vector<std::uint8_t> gen_markov_text(Rng& rng, std::size_t size) {
    const std::string seed = markov_seed_text();
    // order-2 transition table over the seed text
    std::map<std::uint16_t, std::vector<std::uint8_t>> table;
    for (std::size_t i = 0; i + 2 < seed.size(); ++i) {
        const std::uint16_t ctx = std::uint16_t((std::uint8_t(seed[i]) << 8) | std::uint8_t(seed[i + 1]));
        table[ctx].push_back(std::uint8_t(seed[i + 2]));
    }
    std::vector<std::uint8_t> out;
    out.reserve(size);
    std::uint8_t a = std::uint8_t(seed[0]), b = std::uint8_t(seed[1]);
    out.push_back(a);
    if (size > 1) out.push_back(b);
    while (out.size() < size) {
        const std::uint16_t ctx = std::uint16_t((a << 8) | b);
        auto it = table.find(ctx);
        std::uint8_t next;
        if (it == table.end() || it->second.empty()) {
            next = std::uint8_t(' ');
        } else {
            next = it->second[rng.below(it->second.size())];
        }
        out.push_back(next);
        a = b;
        b = next;
    }
    out.resize(size);
    return out;
}

inline void append_str(std::vector<std::uint8_t>& out, const std::string& s) {
    for (char c : s) out.push_back(std::uint8_t(c));
}

inline std::vector<std::uint8_t> gen_arithmetic(Rng& rng, std::size_t size) {
    std::vector<std::uint8_t> out;
    out.reserve(size + 32);
    while (out.size() < size) {
        const long a = long(rng.below(900)) + 1;
        const long b = long(rng.below(900)) + 1;
        const int op = int(rng.below(3));
        long r;
        char oc;
        switch (op) {
            case 0: r = a + b; oc = '+'; break;
            case 1: r = a - b; oc = '-'; break;
            default: r = a * b; oc = '*'; break;
        }
        append_str(out, std::to_string(a) + " " + oc + " " + std::to_string(b) + " = " +
                            std::to_string(r) + "\n");
    }
    out.resize(size);
    return out;
}

inline std::vector<std::uint8_t> gen_keyvalue(Rng& rng, std::size_t size) {
    static const std::array<const char*, 12> sections = {
        "server", "client", "cache", "log", "net", "auth",
        "db", "pool", "queue", "worker", "http", "tls"};
    static const std::array<const char*, 12> keys = {
        "timeout_ms", "retries", "enabled", "max_size", "port", "level",
        "threads", "backlog", "ttl_sec", "rate", "burst", "depth"};
    std::vector<std::uint8_t> out;
    out.reserve(size + 32);
    while (out.size() < size) {
        const char* sec = sections[rng.below(sections.size())];
        const char* key = keys[rng.below(keys.size())];
        std::string val;
        if (rng.below(4) == 0)
            val = rng.below(2) ? "true" : "false";
        else
            val = std::to_string(rng.below(10000));
        append_str(out, std::string(sec) + "." + key + " = " + val + "\n");
    }
    out.resize(size);
    return out;
}

inline std::vector<std::uint8_t> gen_uniform(Rng& rng, std::size_t size) {
    std::vector<std::uint8_t> out(size);
    for (auto& b : out) b = std::uint8_t(rng.below(256));
    return out;
}

}  // namespace detail

// Deterministic byte sequence: pure function of (kind, seed, size).
inline std::vector<std::uint8_t> generate(const DomainSpec& spec) {
    if (spec.size < 1) throw std::invalid_argument("generate: size must be >= 1");
    Rng rng(spec.seed ^ (std::uint64_t(spec.kind) << 56));
    switch (spec.kind) {
        case DomainKind::markov_text: return detail::gen_markov_text(rng, spec.size);
        case DomainKind::arithmetic: return detail::gen_arithmetic(rng, spec.size);
        case DomainKind::keyvalue: return detail::gen_keyvalue(rng, spec.size);
        case DomainKind::uniform: return detail::gen_uniform(rng, spec.size);
    }
    throw std::invalid_argument("unknown kind");
}

// Deterministic fixed-length slices from a freshly generated stream.
inline std::vector<std::vector<std::uint8_t>> sample_calibration(const DomainSpec& spec,
                                                                 std::size_t n_sequences,
                                                                 std::size_t seq_len,
                                                                 std::uint64_t seed) {
    if (n_sequences < 1) throw std::invalid_argument("sample_calibration: n must be >= 1");
    DomainSpec big = spec;
    big.size = n_sequences * seq_len;
    big.seed = spec.seed ^ seed;
    std::vector<std::uint8_t> stream = generate(big);
    std::vector<std::vector<std::uint8_t>> out(n_sequences);
    for (std::size_t i = 0; i < n_sequences; ++i)
        out[i].assign(stream.begin() + std::ptrdiff_t(i * seq_len),
                      stream.begin() + std::ptrdiff_t((i + 1) * seq_len));
    return out;
}

// byte-unigram total variation distance between two streams
inline double tv_distance(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
    std::array<double, 256> pa{}, pb{};
    for (auto v : a) pa[v] += 1.0 / double(a.size());
    for (auto v : b) pb[v] += 1.0 / double(b.size());
    double tv = 0;
    for (int i = 0; i < 256; ++i) tv += std::abs(pa[i] - pb[i]);
    return 0.5 * tv;
}

}  // namespace parse
