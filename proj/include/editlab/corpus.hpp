#pragma once
// Synthetic fact world: closed word-level vocabulary, subject-relation-object
// triples, paraphrase templates, edit splits and CounterFact-format import.

#include "editlab/common.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

namespace editlab {

using json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

// Closed whitespace-tokenized vocabulary. Sub-vocabularies occupy disjoint
// contiguous id ranges: [special][subject][relation][object][filler].
struct Vocabulary {
    std::vector<std::string> tokens;
    std::unordered_map<std::string, int> ids;
    int subject_begin = 0, subject_end = 0;
    int relation_begin = 0, relation_end = 0;
    int object_begin = 0, object_end = 0;
    int filler_begin = 0, filler_end = 0;

    int size() const { return static_cast<int>(tokens.size()); }

    bool is_subject(int id) const { return id >= subject_begin && id < subject_end; }
    bool is_relation(int id) const { return id >= relation_begin && id < relation_end; }
    bool is_object(int id) const { return id >= object_begin && id < object_end; }
    bool is_filler(int id) const { return id >= filler_begin && id < filler_end; }

    int lookup(const std::string& token) const {
        auto it = ids.find(token);
        return it == ids.end() ? -1 : it->second;
    }

    const std::string& text(int id) const {
        require(id >= 0 && id < size(), "token id out of range");
        return tokens[static_cast<std::size_t>(id)];
    }

    // Whitespace word-level encoding; unknown words are an error.
    std::vector<int> encode(const std::string& text_in) const {
        std::vector<int> out;
        std::istringstream is(text_in);
        std::string word;
        while (is >> word) {
            const int id = lookup(word);
            if (id < 0) {
                fail("unknown token '", word, "'");
            }
            out.push_back(id);
        }
        return out;
    }

    std::string decode(const std::vector<int>& seq) const {
        std::string out;
        for (std::size_t i = 0; i < seq.size(); ++i) {
            if (i) {
                out += ' ';
            }
            out += text(seq[i]);
        }
        return out;
    }
};

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

struct FactTriple {
    std::vector<int> subject;     // 1-2 subject-vocabulary token ids
    int relation = -1;            // single relation token id
    int object = -1;              // single object token id
    int relation_index = -1;      // 0-based relation ordinal (for stratification)
    std::string prompt_template;  // canonical template, e.g. "{r} f00 {s}"
};

struct EditRequest {
    FactTriple fact;
    int new_object = -1;  // must differ from fact.object
    int edit_id = -1;
    int fact_index = -1;  // index into the corpus fact list; -1 for imports
};

struct CorpusSpec {
    int n_subjects = 24;
    int n_relations = 5;
    int n_objects = 16;
    int facts_per_relation = 12;
    std::uint64_t seed = 0;
    // Vocabulary layout; -1 means "exactly as large as needed".
    int n_special = 1;
    int n_subject_tokens = -1;
    int n_relation_tokens = -1;
    int n_object_tokens = -1;
    int n_filler_tokens = 64;
    int templates_per_relation = 2;
    double two_token_subject_fraction = 0.5;
    int neutral_train_tokens = 20000;
    int neutral_eval_tokens = 10000;
    bool build_edit_pool = true;  // corpora that can never be edited are refused

    void validate() const {
        require(n_subjects > 0 && n_relations > 0 && n_objects > 0 && facts_per_relation > 0,
                "corpus spec counts must be positive");
        require(facts_per_relation <= n_subjects,
                "facts_per_relation exceeds n_subjects; (s,r) pairs could not be unique");
        if (build_edit_pool && n_objects < 2) {
            fail("corpus spec requires an edit pool but n_objects=1: no o* != o exists");
        }
        require(templates_per_relation >= 2, "at least 2 paraphrase templates per relation required");
        require(templates_per_relation <= 3, "at most 3 templates per relation supported");
        require(n_filler_tokens >= 8, "filler vocabulary too small for neutral text");
        require(two_token_subject_fraction >= 0.0 && two_token_subject_fraction <= 1.0,
                "two_token_subject_fraction must lie in [0,1]");
        require(neutral_train_tokens >= 0 && neutral_eval_tokens >= 2,
                "neutral text sizes invalid");
    }
};

struct RenderedPrompt {
    std::vector<int> tokens;
    int subject_last = -1;  // position of the subject's last token
};

struct Corpus {
    CorpusSpec spec;
    Vocabulary vocab;
    std::vector<FactTriple> facts;
    std::vector<std::vector<std::string>> relation_templates;  // per relation
    std::vector<std::vector<int>> train_sentences;             // prompt + object
    std::vector<int> neutral_train;
    std::vector<int> neutral_eval;

    RenderedPrompt render(const FactTriple& fact, const std::string& tmpl) const;
    RenderedPrompt render_canonical(const FactTriple& fact) const {
        return render(fact, fact.prompt_template);
    }
    std::vector<RenderedPrompt> render_all_templates(const FactTriple& fact) const {
        std::vector<RenderedPrompt> out;
        for (const auto& t : relation_templates.at(static_cast<std::size_t>(fact.relation_index))) {
            out.push_back(render(fact, t));
        }
        return out;
    }
};

inline RenderedPrompt Corpus::render(const FactTriple& fact, const std::string& tmpl) const {
    RenderedPrompt out;
    std::istringstream is(tmpl);
    std::string word;
    bool saw_subject = false;
    while (is >> word) {
        if (word == "{s}") {
            for (int tok : fact.subject) {
                out.tokens.push_back(tok);
            }
            out.subject_last = static_cast<int>(out.tokens.size()) - 1;
            saw_subject = true;
        } else if (word == "{r}") {
            out.tokens.push_back(fact.relation);
        } else {
            const int id = vocab.lookup(word);
            if (id < 0) {
                fail("template word '", word, "' not in vocabulary");
            }
            out.tokens.push_back(id);
        }
    }
    if (!saw_subject) {
        fail("template '", tmpl, "' does not place the subject");
    }
    return out;
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

namespace detail {

inline std::string padded_name(char prefix, int index, int width) {
    std::ostringstream os;
    os << prefix;
    std::string digits = std::to_string(index);
    while (static_cast<int>(digits.size()) < width) {
        digits.insert(digits.begin(), '0');
    }
    os << digits;
    return os.str();
}

}  // namespace detail

inline Corpus generate_corpus(const CorpusSpec& spec_in) {
    CorpusSpec spec = spec_in;
    spec.validate();
    Rng rng(derive_seed(spec.seed, 0x05));

    // Subject token lengths drawn first so the required pool size is known.
    std::vector<int> subject_len(static_cast<std::size_t>(spec.n_subjects));
    int subject_tokens_needed = 0;
    for (auto& len : subject_len) {
        len = rng.uniform() < spec.two_token_subject_fraction ? 2 : 1;
        subject_tokens_needed += len;
    }
    // Make sure both lengths appear so "last subject token" indexing is
    // exercised nontrivially.
    if (spec.n_subjects >= 2) {
        if (std::count(subject_len.begin(), subject_len.end(), 2) == 0) {
            subject_len[0] = 2;
            subject_tokens_needed += 1;
        } else if (std::count(subject_len.begin(), subject_len.end(), 1) == 0) {
            subject_tokens_needed -= 1;
            subject_len[0] = 1;
        }
    }

    const int n_subj_tok = spec.n_subject_tokens < 0 ? subject_tokens_needed : spec.n_subject_tokens;
    const int n_rel_tok = spec.n_relation_tokens < 0 ? spec.n_relations : spec.n_relation_tokens;
    const int n_obj_tok = spec.n_object_tokens < 0 ? spec.n_objects : spec.n_object_tokens;
    if (n_subj_tok < subject_tokens_needed) {
        fail("vocabulary overflow: subject sub-vocabulary holds ", n_subj_tok,
             " tokens but ", subject_tokens_needed, " are required");
    }
    if (n_rel_tok < spec.n_relations) {
        fail("vocabulary overflow: relation sub-vocabulary holds ", n_rel_tok,
             " tokens but ", spec.n_relations, " are required");
    }
    if (n_obj_tok < spec.n_objects) {
        fail("vocabulary overflow: object sub-vocabulary holds ", n_obj_tok,
             " tokens but ", spec.n_objects, " are required");
    }

    Corpus corpus;
    corpus.spec = spec;
    Vocabulary& v = corpus.vocab;
    for (int i = 0; i < spec.n_special; ++i) {
        v.tokens.push_back("<sp" + std::to_string(i) + ">");
    }
    v.subject_begin = v.size();
    for (int i = 0; i < n_subj_tok; ++i) {
        v.tokens.push_back(detail::padded_name('s', i, 3));
    }
    v.subject_end = v.size();
    v.relation_begin = v.size();
    for (int i = 0; i < n_rel_tok; ++i) {
        v.tokens.push_back(detail::padded_name('r', i, 2));
    }
    v.relation_end = v.size();
    v.object_begin = v.size();
    for (int i = 0; i < n_obj_tok; ++i) {
        v.tokens.push_back(detail::padded_name('o', i, 3));
    }
    v.object_end = v.size();
    v.filler_begin = v.size();
    for (int i = 0; i < spec.n_filler_tokens; ++i) {
        v.tokens.push_back(detail::padded_name('w', i, 3));
    }
    v.filler_end = v.size();
    for (int i = 0; i < v.size(); ++i) {
        v.ids.emplace(v.tokens[static_cast<std::size_t>(i)], i);
    }

    // Subject token sequences: consecutive tokens from the subject pool.
    std::vector<std::vector<int>> subjects;
    {
        int next = v.subject_begin;
        for (int i = 0; i < spec.n_subjects; ++i) {
            std::vector<int> seq;
            for (int j = 0; j < subject_len[static_cast<std::size_t>(i)]; ++j) {
                seq.push_back(next++);
            }
            subjects.push_back(std::move(seq));
        }
    }

    // Paraphrase templates per relation, cloze-shaped: the relation phrase
    // precedes the subject mention and the object is predicted right after the
    // final subject token ("the capital of France is ___"). Paraphrases swap a
    // connector word drawn from the filler vocabulary (so no fact-bearing
    // token is reused) and keep every template the same length, which keeps
    // the subject at one absolute position across renderings.
    corpus.relation_templates.resize(static_cast<std::size_t>(spec.n_relations));
    for (int r = 0; r < spec.n_relations; ++r) {
        auto& tmpls = corpus.relation_templates[static_cast<std::size_t>(r)];
        for (int t = 0; t < spec.templates_per_relation; ++t) {
            const std::string mid =
                v.text(v.filler_begin + (3 * r + t) % spec.n_filler_tokens);
            tmpls.push_back("{r} " + mid + " {s}");
        }
    }

    // Facts: per relation, distinct subjects, uniform objects.
    for (int r = 0; r < spec.n_relations; ++r) {
        std::vector<int> order(static_cast<std::size_t>(spec.n_subjects));
        for (std::size_t i = 0; i < order.size(); ++i) {
            order[i] = static_cast<int>(i);
        }
        rng.shuffle(order);
        for (int f = 0; f < spec.facts_per_relation; ++f) {
            FactTriple fact;
            fact.subject = subjects[static_cast<std::size_t>(order[static_cast<std::size_t>(f)])];
            fact.relation = v.relation_begin + r;
            fact.relation_index = r;
            fact.object = v.object_begin + static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.n_objects)));
            fact.prompt_template = corpus.relation_templates[static_cast<std::size_t>(r)][0];
            corpus.facts.push_back(std::move(fact));
        }
    }

    // Training sentences: every fact through every paraphrase template.
    for (const auto& fact : corpus.facts) {
        for (const auto& rendered : corpus.render_all_templates(fact)) {
            std::vector<int> sentence = rendered.tokens;
            sentence.push_back(fact.object);
            corpus.train_sentences.push_back(std::move(sentence));
        }
    }

    // Neutral text: a seeded bigram chain over filler tokens. It shares the
    // vocabulary but contains no subject/relation/object token, so it states
    // no facts.
    {
        Rng chain_rng(derive_seed(spec.seed, 0x17));
        const int F = spec.n_filler_tokens;
        std::vector<std::array<int, 4>> successors(static_cast<std::size_t>(F));
        for (int i = 0; i < F; ++i) {
            for (int j = 0; j < 4; ++j) {
                successors[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] =
                    static_cast<int>(chain_rng.below(static_cast<std::uint64_t>(F)));
            }
        }
        auto emit = [&](std::vector<int>& out, int count) {
            int cur = static_cast<int>(chain_rng.below(static_cast<std::uint64_t>(F)));
            for (int t = 0; t < count; ++t) {
                out.push_back(v.filler_begin + cur);
                if (chain_rng.uniform() < 0.85) {
                    cur = successors[static_cast<std::size_t>(cur)][chain_rng.below(4)];
                } else {
                    cur = static_cast<int>(chain_rng.below(static_cast<std::uint64_t>(F)));
                }
            }
        };
        emit(corpus.neutral_train, spec.neutral_train_tokens);
        emit(corpus.neutral_eval, spec.neutral_eval_tokens);
    }

    return corpus;
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

enum class SplitMode { StratifiedByRelation, RelationDisjoint };

inline std::string to_string(SplitMode m) {
    return m == SplitMode::StratifiedByRelation ? "stratified-by-relation" : "relation-disjoint";
}

struct EditSplit {
    std::vector<EditRequest> train;
    std::vector<EditRequest> test;
    SplitMode mode = SplitMode::StratifiedByRelation;
};

namespace detail {

inline int sample_new_object(const Corpus& corpus, int original, Rng& rng) {
    const int n = corpus.spec.n_objects;
    require(n >= 2, "no alternative object exists: n_objects < 2");
    // Uniform over the n-1 valid objects.
    int pick = static_cast<int>(rng.below(static_cast<std::uint64_t>(n - 1)));
    int candidate = corpus.vocab.object_begin + pick;
    if (candidate >= original) {
        ++candidate;
    }
    return candidate;
}

inline EditRequest make_request(const Corpus& corpus, int fact_index, int edit_id, Rng& rng) {
    EditRequest req;
    req.fact = corpus.facts[static_cast<std::size_t>(fact_index)];
    req.fact_index = fact_index;
    req.edit_id = edit_id;
    req.new_object = sample_new_object(corpus, req.fact.object, rng);
    return req;
}

}  // namespace detail

inline EditSplit split_edits(const Corpus& corpus, int n_train, int n_test, SplitMode mode,
                             std::uint64_t seed) {
    const int total = static_cast<int>(corpus.facts.size());
    require(n_train >= 0 && n_test >= 0, "split sizes must be non-negative");
    require(n_train + n_test <= total, "n_train + n_test exceeds available facts");
    require(corpus.spec.n_objects >= 2, "no alternative object exists: n_objects < 2");

    Rng rng(derive_seed(seed, 0x51));
    const int R = corpus.spec.n_relations;

    // Fact indices grouped and shuffled per relation.
    std::vector<std::vector<int>> by_relation(static_cast<std::size_t>(R));
    for (int i = 0; i < total; ++i) {
        by_relation[static_cast<std::size_t>(corpus.facts[static_cast<std::size_t>(i)].relation_index)]
            .push_back(i);
    }
    for (auto& group : by_relation) {
        rng.shuffle(group);
    }

    EditSplit split;
    split.mode = mode;
    int edit_id = 0;

    if (mode == SplitMode::StratifiedByRelation) {
        auto quotas = [&](int want) {
            std::vector<int> q(static_cast<std::size_t>(R), want / R);
            for (int r = 0; r < want % R; ++r) {
                ++q[static_cast<std::size_t>(r)];
            }
            return q;
        };
        const auto train_q = quotas(n_train);
        const auto test_q = quotas(n_test);
        for (int r = 0; r < R; ++r) {
            const auto& group = by_relation[static_cast<std::size_t>(r)];
            const int need = train_q[static_cast<std::size_t>(r)] + test_q[static_cast<std::size_t>(r)];
            if (static_cast<int>(group.size()) < need) {
                fail("stratified split infeasible: relation ",
                     corpus.vocab.text(corpus.vocab.relation_begin + r), " has ", group.size(),
                     " facts but needs ", need);
            }
            int cursor = 0;
            for (int i = 0; i < train_q[static_cast<std::size_t>(r)]; ++i) {
                split.train.push_back(detail::make_request(corpus, group[static_cast<std::size_t>(cursor++)], edit_id++, rng));
            }
            for (int i = 0; i < test_q[static_cast<std::size_t>(r)]; ++i) {
                split.test.push_back(detail::make_request(corpus, group[static_cast<std::size_t>(cursor++)], edit_id++, rng));
            }
        }
    } else {
        require(R >= 2, "relation-disjoint split requires at least 2 relations");
        std::vector<int> rel_order(static_cast<std::size_t>(R));
        for (std::size_t i = 0; i < rel_order.size(); ++i) {
            rel_order[i] = static_cast<int>(i);
        }
        rng.shuffle(rel_order);
        // Assign relations to the train side until it can cover n_train,
        // leaving at least one relation for the test side.
        std::vector<int> train_rels, test_rels;
        int train_capacity = 0;
        for (std::size_t i = 0; i < rel_order.size(); ++i) {
            const int r = rel_order[i];
            const bool train_full = train_capacity >= n_train && !train_rels.empty();
            const bool must_leave_for_test = static_cast<int>(rel_order.size() - i) <= 1 && test_rels.empty();
            if (!train_full && !must_leave_for_test) {
                train_rels.push_back(r);
                train_capacity += static_cast<int>(by_relation[static_cast<std::size_t>(r)].size());
            } else {
                test_rels.push_back(r);
            }
        }
        int test_capacity = 0;
        for (int r : test_rels) {
            test_capacity += static_cast<int>(by_relation[static_cast<std::size_t>(r)].size());
        }
        if (train_capacity < n_train || test_capacity < n_test) {
            fail("relation-disjoint split infeasible: train capacity ", train_capacity, " (need ",
                 n_train, "), test capacity ", test_capacity, " (need ", n_test, ")");
        }
        auto take = [&](const std::vector<int>& rels, int want, std::vector<EditRequest>& out) {
            // Round-robin across the side's relations keeps counts balanced.
            std::vector<std::size_t> cursors(rels.size(), 0);
            int taken = 0;
            while (taken < want) {
                bool progress = false;
                for (std::size_t i = 0; i < rels.size() && taken < want; ++i) {
                    const auto& group = by_relation[static_cast<std::size_t>(rels[i])];
                    if (cursors[i] < group.size()) {
                        out.push_back(detail::make_request(corpus, group[cursors[i]++], edit_id++, rng));
                        ++taken;
                        progress = true;
                    }
                }
                require(progress, "internal: disjoint split exhausted capacity");
            }
        };
        take(train_rels, n_train, split.train);
        take(test_rels, n_test, split.test);
    }
    return split;
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

struct StatsRecord {
    int facts = 0;
    int relations = 0;
    int unique_objects = 0;
    int unique_subjects = 0;
    int unique_mappings = 0;  // distinct o -> o* pairs
};

inline StatsRecord corpus_stats(const std::vector<EditRequest>& edits) {
    require(!edits.empty(), "corpus_stats: empty edit set");
    std::set<int> relations, objects;
    std::set<std::vector<int>> subjects;
    std::set<std::pair<int, int>> mappings;
    for (const auto& e : edits) {
        relations.insert(e.fact.relation);
        objects.insert(e.fact.object);
        subjects.insert(e.fact.subject);
        mappings.insert({e.fact.object, e.new_object});
    }
    StatsRecord s;
    s.facts = static_cast<int>(edits.size());
    s.relations = static_cast<int>(relations.size());
    s.unique_objects = static_cast<int>(objects.size());
    s.unique_subjects = static_cast<int>(subjects.size());
    s.unique_mappings = static_cast<int>(mappings.size());
    return s;
}

// ---------------------------------------------------------------------------
// CounterFact-format import / export
// ---------------------------------------------------------------------------

struct ImportRejection {
    std::size_t record_index = 0;
    std::string reason;
};

struct ImportResult {
    std::vector<EditRequest> accepted;
    std::vector<ImportRejection> rejected;
};

namespace detail {

// Accepts both the flat record shape and the nested "requested_rewrite"
// CounterFact shape; target fields may be plain strings or {"str": ...}.
inline std::string target_string(const json& j) {
    if (j.is_string()) {
        return j.get<std::string>();
    }
    if (j.is_object() && j.contains("str") && j["str"].is_string()) {
        return j["str"].get<std::string>();
    }
    fail("target field is neither a string nor {\"str\": ...}");
}

inline std::optional<std::string> import_one(const Corpus& corpus, const json& rec, int edit_id,
                                             EditRequest& out) {
    const json& r = rec.contains("requested_rewrite") ? rec.at("requested_rewrite") : rec;
    for (const char* field : {"prompt", "subject", "target_true", "target_new"}) {
        if (!r.contains(field)) {
            return std::string("missing field '") + field + "'";
        }
    }
    const std::string prompt = r.at("prompt").get<std::string>();
    const std::string subject = r.at("subject").get<std::string>();
    const std::string target_true = target_string(r.at("target_true"));
    const std::string target_new = target_string(r.at("target_new"));

    const Vocabulary& v = corpus.vocab;

    auto single_object = [&](const std::string& text, int& id) -> std::optional<std::string> {
        std::istringstream is(text);
        std::string w0, w1;
        if (!(is >> w0)) {
            return std::string("empty object");
        }
        if (is >> w1) {
            return std::string("multi-token object");
        }
        id = v.lookup(w0);
        if (id < 0) {
            return "object token '" + w0 + "' not in vocabulary";
        }
        if (!v.is_object(id)) {
            return "token '" + w0 + "' is not an object token";
        }
        return std::nullopt;
    };

    int o = -1, o_star = -1;
    if (auto err = single_object(target_true, o)) {
        return err;
    }
    if (auto err = single_object(target_new, o_star)) {
        return err;
    }
    if (o == o_star) {
        return std::string("target_new equals target_true");
    }

    // Subject: 1-2 subject-vocabulary tokens.
    std::vector<int> subj_tokens;
    {
        std::istringstream is(subject);
        std::string w;
        while (is >> w) {
            const int id = v.lookup(w);
            if (id < 0) {
                return "subject token '" + w + "' not in vocabulary";
            }
            if (!v.is_subject(id)) {
                return "token '" + w + "' is not a subject token";
            }
            subj_tokens.push_back(id);
        }
    }
    if (subj_tokens.empty() || subj_tokens.size() > 2) {
        return std::string("subject must span 1-2 tokens");
    }

    // Prompt: "{}" placeholder or literal subject mention; must end with a
    // relation token and tokenize fully.
    std::string rendered = prompt;
    if (auto pos = rendered.find("{}"); pos != std::string::npos) {
        rendered = rendered.substr(0, pos) + subject + rendered.substr(pos + 2);
    }
    std::vector<int> prompt_tokens;
    {
        std::istringstream is(rendered);
        std::string w;
        while (is >> w) {
            const int id = v.lookup(w);
            if (id < 0) {
                return "prompt token '" + w + "' not in vocabulary";
            }
            prompt_tokens.push_back(id);
        }
    }
    int relation_pos = -1;
    for (std::size_t i = 0; i < prompt_tokens.size(); ++i) {
        if (v.is_relation(prompt_tokens[i])) {
            if (relation_pos >= 0) {
                return std::string("prompt contains more than one relation token");
            }
            relation_pos = static_cast<int>(i);
        }
    }
    if (relation_pos < 0) {
        return std::string("prompt contains no relation token");
    }
    // Locate the subject tokens contiguously in the prompt.
    int subject_start = -1;
    for (std::size_t i = 0; i + subj_tokens.size() <= prompt_tokens.size(); ++i) {
        if (std::equal(subj_tokens.begin(), subj_tokens.end(), prompt_tokens.begin() + static_cast<long>(i))) {
            subject_start = static_cast<int>(i);
            break;
        }
    }
    if (subject_start < 0) {
        return std::string("subject does not appear in prompt");
    }

    out.fact.subject = subj_tokens;
    out.fact.relation = prompt_tokens[static_cast<std::size_t>(relation_pos)];
    out.fact.relation_index = out.fact.relation - v.relation_begin;
    out.fact.object = o;
    // Reconstruct a template by substituting the placeholders back.
    {
        std::string tmpl;
        for (std::size_t i = 0; i < prompt_tokens.size(); ++i) {
            if (static_cast<int>(i) == subject_start) {
                if (!tmpl.empty()) {
                    tmpl += ' ';
                }
                tmpl += "{s}";
                i += subj_tokens.size() - 1;
                continue;
            }
            if (!tmpl.empty()) {
                tmpl += ' ';
            }
            tmpl += (static_cast<int>(i) == relation_pos) ? "{r}" : v.text(prompt_tokens[i]);
        }
        out.fact.prompt_template = tmpl;
    }
    out.new_object = o_star;
    out.edit_id = edit_id;
    out.fact_index = -1;
    return std::nullopt;
}

}  // namespace detail

// Accepts a whole-stream JSON array or line-delimited records. Malformed
// JSON raises an error carrying the record index; per-record validation
// failures are collected with reasons instead.
inline ImportResult import_counterfact(const Corpus& corpus, std::istream& in) {
    ImportResult result;
    std::vector<json> records;

    std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const auto first_nonspace = content.find_first_not_of(" \t\r\n");
    if (first_nonspace == std::string::npos) {
        return result;  // empty stream: empty list, zero errors
    }
    if (content[first_nonspace] == '[') {
        json arr;
        try {
            arr = json::parse(content);
        } catch (const json::parse_error& e) {
            fail("malformed JSON array: ", e.what());
        }
        for (auto& rec : arr) {
            records.push_back(std::move(rec));
        }
    } else {
        std::istringstream lines(content);
        std::string line;
        std::size_t line_index = 0;
        while (std::getline(lines, line)) {
            const auto ns = line.find_first_not_of(" \t\r");
            if (ns == std::string::npos) {
                ++line_index;
                continue;
            }
            try {
                records.push_back(json::parse(line));
            } catch (const json::parse_error& e) {
                fail("malformed JSON at record ", line_index, ": ", e.what());
            }
            ++line_index;
        }
    }

    for (std::size_t i = 0; i < records.size(); ++i) {
        EditRequest req;
        if (auto reason = detail::import_one(corpus, records[i], static_cast<int>(result.accepted.size()), req)) {
            result.rejected.push_back({i, *reason});
        } else {
            result.accepted.push_back(std::move(req));
        }
    }
    return result;
}

inline json export_counterfact(const Corpus& corpus, const std::vector<EditRequest>& requests) {
    const Vocabulary& v = corpus.vocab;
    json arr = json::array();
    for (const auto& req : requests) {
        std::string subject = v.decode(req.fact.subject);
        std::string prompt = req.fact.prompt_template;
        if (auto pos = prompt.find("{s}"); pos != std::string::npos) {
            prompt = prompt.substr(0, pos) + "{}" + prompt.substr(pos + 3);
        }
        if (auto pos = prompt.find("{r}"); pos != std::string::npos) {
            prompt = prompt.substr(0, pos) + v.text(req.fact.relation) + prompt.substr(pos + 3);
        }
        arr.push_back(json{{"prompt", prompt},
                           {"subject", subject},
                           {"target_true", v.text(req.fact.object)},
                           {"target_new", v.text(req.new_object)}});
    }
    return arr;
}

// ---------------------------------------------------------------------------
// Serialization (line-delimited text + JSON manifest)
// ---------------------------------------------------------------------------

namespace detail {

inline json spec_to_json(const CorpusSpec& s) {
    return json{{"n_subjects", s.n_subjects},
                {"n_relations", s.n_relations},
                {"n_objects", s.n_objects},
                {"facts_per_relation", s.facts_per_relation},
                {"seed", s.seed},
                {"n_special", s.n_special},
                {"n_subject_tokens", s.n_subject_tokens},
                {"n_relation_tokens", s.n_relation_tokens},
                {"n_object_tokens", s.n_object_tokens},
                {"n_filler_tokens", s.n_filler_tokens},
                {"templates_per_relation", s.templates_per_relation},
                {"two_token_subject_fraction", s.two_token_subject_fraction},
                {"neutral_train_tokens", s.neutral_train_tokens},
                {"neutral_eval_tokens", s.neutral_eval_tokens},
                {"build_edit_pool", s.build_edit_pool}};
}

inline CorpusSpec spec_from_json(const json& j) {
    CorpusSpec s;
    s.n_subjects = j.at("n_subjects").get<int>();
    s.n_relations = j.at("n_relations").get<int>();
    s.n_objects = j.at("n_objects").get<int>();
    s.facts_per_relation = j.at("facts_per_relation").get<int>();
    s.seed = j.at("seed").get<std::uint64_t>();
    s.n_special = j.at("n_special").get<int>();
    s.n_subject_tokens = j.at("n_subject_tokens").get<int>();
    s.n_relation_tokens = j.at("n_relation_tokens").get<int>();
    s.n_object_tokens = j.at("n_object_tokens").get<int>();
    s.n_filler_tokens = j.at("n_filler_tokens").get<int>();
    s.templates_per_relation = j.at("templates_per_relation").get<int>();
    s.two_token_subject_fraction = j.at("two_token_subject_fraction").get<double>();
    s.neutral_train_tokens = j.at("neutral_train_tokens").get<int>();
    s.neutral_eval_tokens = j.at("neutral_eval_tokens").get<int>();
    s.build_edit_pool = j.at("build_edit_pool").get<bool>();
    return s;
}

inline json fact_to_json(const Corpus& c, const FactTriple& f) {
    return json{{"subject", c.vocab.decode(f.subject)},
                {"relation", c.vocab.text(f.relation)},
                {"object", c.vocab.text(f.object)},
                {"relation_index", f.relation_index},
                {"template", f.prompt_template}};
}

inline FactTriple fact_from_json(const Corpus& c, const json& j) {
    FactTriple f;
    f.subject = c.vocab.encode(j.at("subject").get<std::string>());
    f.relation = c.vocab.lookup(j.at("relation").get<std::string>());
    f.object = c.vocab.lookup(j.at("object").get<std::string>());
    f.relation_index = j.at("relation_index").get<int>();
    f.prompt_template = j.at("template").get<std::string>();
    require(f.relation >= 0 && f.object >= 0, "corpus manifest references unknown tokens");
    return f;
}

inline void write_token_lines(const std::filesystem::path& path, const Vocabulary& v,
                              const std::vector<int>& stream, std::size_t per_line = 20) {
    std::ostringstream os;
    for (std::size_t i = 0; i < stream.size(); ++i) {
        os << v.text(stream[i]);
        os << (((i + 1) % per_line == 0 || i + 1 == stream.size()) ? '\n' : ' ');
    }
    write_file_bytes(path, os.str());
}

inline std::vector<int> read_token_stream(const std::filesystem::path& path, const Vocabulary& v) {
    return v.encode(read_file_bytes(path));
}

}  // namespace detail

inline void save_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    json manifest;
    manifest["spec"] = detail::spec_to_json(corpus.spec);
    manifest["vocab"] = json{{"tokens", corpus.vocab.tokens},
                             {"subject_range", {corpus.vocab.subject_begin, corpus.vocab.subject_end}},
                             {"relation_range", {corpus.vocab.relation_begin, corpus.vocab.relation_end}},
                             {"object_range", {corpus.vocab.object_begin, corpus.vocab.object_end}},
                             {"filler_range", {corpus.vocab.filler_begin, corpus.vocab.filler_end}}};
    manifest["relation_templates"] = corpus.relation_templates;
    json facts = json::array();
    for (const auto& f : corpus.facts) {
        facts.push_back(detail::fact_to_json(corpus, f));
    }
    manifest["facts"] = std::move(facts);
    write_file_bytes(dir / "corpus.json", manifest.dump(2) + "\n");

    std::ostringstream sentences;
    for (const auto& s : corpus.train_sentences) {
        sentences << corpus.vocab.decode(s) << '\n';
    }
    write_file_bytes(dir / "train_sentences.txt", sentences.str());
    detail::write_token_lines(dir / "neutral_train.txt", corpus.vocab, corpus.neutral_train);
    detail::write_token_lines(dir / "neutral_eval.txt", corpus.vocab, corpus.neutral_eval);
}

inline Corpus load_corpus(const std::filesystem::path& dir) {
    const json manifest = json::parse(read_file_bytes(dir / "corpus.json"));
    Corpus corpus;
    corpus.spec = detail::spec_from_json(manifest.at("spec"));
    Vocabulary& v = corpus.vocab;
    v.tokens = manifest.at("vocab").at("tokens").get<std::vector<std::string>>();
    const auto range = [&](const char* key, int& lo, int& hi) {
        lo = manifest.at("vocab").at(key).at(0).get<int>();
        hi = manifest.at("vocab").at(key).at(1).get<int>();
    };
    range("subject_range", v.subject_begin, v.subject_end);
    range("relation_range", v.relation_begin, v.relation_end);
    range("object_range", v.object_begin, v.object_end);
    range("filler_range", v.filler_begin, v.filler_end);
    for (int i = 0; i < v.size(); ++i) {
        v.ids.emplace(v.tokens[static_cast<std::size_t>(i)], i);
    }
    corpus.relation_templates =
        manifest.at("relation_templates").get<std::vector<std::vector<std::string>>>();
    for (const auto& jf : manifest.at("facts")) {
        corpus.facts.push_back(detail::fact_from_json(corpus, jf));
    }
    {
        std::istringstream lines(read_file_bytes(dir / "train_sentences.txt"));
        std::string line;
        while (std::getline(lines, line)) {
            if (!line.empty()) {
                corpus.train_sentences.push_back(v.encode(line));
            }
        }
    }
    corpus.neutral_train = detail::read_token_stream(dir / "neutral_train.txt", v);
    corpus.neutral_eval = detail::read_token_stream(dir / "neutral_eval.txt", v);
    return corpus;
}

inline json edit_request_to_json(const Corpus& corpus, const EditRequest& req) {
    json j = detail::fact_to_json(corpus, req.fact);
    j["new_object"] = corpus.vocab.text(req.new_object);
    j["edit_id"] = req.edit_id;
    j["fact_index"] = req.fact_index;
    return j;
}

inline EditRequest edit_request_from_json(const Corpus& corpus, const json& j) {
    EditRequest req;
    req.fact = detail::fact_from_json(corpus, j);
    req.new_object = corpus.vocab.lookup(j.at("new_object").get<std::string>());
    require(req.new_object >= 0, "edit request references unknown token");
    req.edit_id = j.at("edit_id").get<int>();
    req.fact_index = j.at("fact_index").get<int>();
    return req;
}

inline void save_splits(const Corpus& corpus, const EditSplit& split,
                        const std::filesystem::path& path) {
    json j;
    j["mode"] = to_string(split.mode);
    json train = json::array(), test = json::array();
    for (const auto& r : split.train) {
        train.push_back(edit_request_to_json(corpus, r));
    }
    for (const auto& r : split.test) {
        test.push_back(edit_request_to_json(corpus, r));
    }
    j["train"] = std::move(train);
    j["test"] = std::move(test);
    write_file_bytes(path, j.dump(2) + "\n");
}

inline EditSplit load_splits(const Corpus& corpus, const std::filesystem::path& path) {
    const json j = json::parse(read_file_bytes(path));
    EditSplit split;
    split.mode = j.at("mode").get<std::string>() == "relation-disjoint"
                     ? SplitMode::RelationDisjoint
                     : SplitMode::StratifiedByRelation;
    for (const auto& r : j.at("train")) {
        split.train.push_back(edit_request_from_json(corpus, r));
    }
    for (const auto& r : j.at("test")) {
        split.test.push_back(edit_request_from_json(corpus, r));
    }
    return split;
}

}  // namespace editlab
