#pragma once

// Corpus-level captioning metrics (BLEU-4, METEOR with exact+stem matching,
// ROUGE-L, CIDEr-D) and the challenge score composition.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "ster/dataset.hpp"
#include "ster/error.hpp"
#include "ster/text.hpp"

namespace ster::metrics {

using text::tokenize;
using Tokens = std::vector<std::string>;

struct EvalPair {
  std::string item_id;
  std::string hypothesis;
  std::vector<std::string> references;
};

struct MetricReport {
  double bleu4 = 0;
  double meteor = 0;
  double rouge_l = 0;
  double cider = 0;
  double caption_score = 0;
  std::int64_t n_items = 0;
};

struct ScoreWeights {
  double bleu4 = 1.0;
  double meteor = 1.0;
  double rouge_l = 1.0;
  double cider = 1.0;  // applied to cider / 10
};

namespace detail {

inline void require_nonempty(std::size_t n, const char* metric) {
  if (n == 0) throw EmptyCorpus(std::string(metric) + " needs at least one item");
}

inline void require_references(const EvalPair& p) {
  if (p.references.empty()) throw ValidationError("item '" + p.item_id + "' has no references");
}

}  // namespace detail

// --- n-grams --------------------------------------------------------------

using NgramCounts = std::map<Tokens, std::int64_t>;

inline NgramCounts count_ngrams(const Tokens& tokens, std::size_t n) {
  NgramCounts counts;
  if (n == 0 || tokens.size() < n) return counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i)
    ++counts[Tokens(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                    tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return counts;
}

// --- BLEU -----------------------------------------------------------------

inline constexpr std::size_t kBleuOrder = 4;

struct BleuStats {
  std::array<std::int64_t, kBleuOrder> matched{};  // clipped n-gram matches
  std::array<std::int64_t, kBleuOrder> total{};    // hypothesis n-grams
  std::int64_t hyp_length = 0;
  std::int64_t ref_length = 0;  // closest reference length

  BleuStats& operator+=(const BleuStats& o) {
    for (std::size_t n = 0; n < kBleuOrder; ++n) {
      matched[n] += o.matched[n];
      total[n] += o.total[n];
    }
    hyp_length += o.hyp_length;
    ref_length += o.ref_length;
    return *this;
  }
};

// Per-sentence sufficient statistics. Each hypothesis n-gram count is clipped
// by its maximum count in any single reference.
inline BleuStats bleu_stats(const Tokens& hyp, const std::vector<Tokens>& refs) {
  BleuStats st;
  st.hyp_length = static_cast<std::int64_t>(hyp.size());
  // Closest reference length; ties go to the shorter reference.
  std::int64_t best = -1;
  for (const auto& r : refs) {
    const auto len = static_cast<std::int64_t>(r.size());
    if (best < 0 || std::llabs(len - st.hyp_length) < std::llabs(best - st.hyp_length) ||
        (std::llabs(len - st.hyp_length) == std::llabs(best - st.hyp_length) && len < best))
      best = len;
  }
  st.ref_length = std::max<std::int64_t>(best, 0);

  for (std::size_t n = 1; n <= kBleuOrder; ++n) {
    const NgramCounts hyp_counts = count_ngrams(hyp, n);
    NgramCounts max_ref;
    for (const auto& r : refs)
      for (const auto& [gram, c] : count_ngrams(r, n)) max_ref[gram] = std::max(max_ref[gram], c);
    for (const auto& [gram, c] : hyp_counts) {
      st.total[n - 1] += c;
      const auto it = max_ref.find(gram);
      if (it != max_ref.end()) st.matched[n - 1] += std::min(c, it->second);
    }
  }
  return st;
}

struct BleuOptions {
  // Add-one smoothing on n > 1 precisions. Off by default: any zero precision
  // yields a hard zero.
  bool smooth = false;
};

inline double bleu_from_stats(const BleuStats& st, const BleuOptions& opts = {}) {
  if (st.hyp_length == 0) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 0; n < kBleuOrder; ++n) {
    double num = static_cast<double>(st.matched[n]);
    double den = static_cast<double>(st.total[n]);
    if (opts.smooth && n > 0) {
      num += 1.0;
      den += 1.0;
    }
    if (num <= 0.0 || den <= 0.0) return 0.0;
    log_sum += std::log(num / den);
  }
  const double c = static_cast<double>(st.hyp_length);
  const double r = static_cast<double>(st.ref_length);
  const double bp = c < r ? std::exp(1.0 - r / c) : 1.0;
  return bp * std::exp(log_sum / static_cast<double>(kBleuOrder));
}

inline double bleu4(const std::vector<EvalPair>& corpus, const BleuOptions& opts = {}) {
  detail::require_nonempty(corpus.size(), "bleu4");
  BleuStats total;
  for (const auto& p : corpus) {
    detail::require_references(p);
    std::vector<Tokens> refs;
    for (const auto& r : p.references) refs.push_back(tokenize(r));
    total += bleu_stats(tokenize(p.hypothesis), refs);
  }
  return bleu_from_stats(total, opts);
}

// --- ROUGE-L --------------------------------------------------------------

inline constexpr double kRougeBeta = 1.2;

inline std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  if (a.empty() || b.empty()) return 0;
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline double rouge_l_f(std::size_t lcs, std::size_t hyp_len, std::size_t ref_len,
                        double beta = kRougeBeta) {
  if (lcs == 0 || hyp_len == 0 || ref_len == 0) return 0.0;
  const double p = static_cast<double>(lcs) / static_cast<double>(hyp_len);
  const double r = static_cast<double>(lcs) / static_cast<double>(ref_len);
  const double b2 = beta * beta;
  return (1.0 + b2) * p * r / (r + b2 * p);
}

inline double rouge_l_item(const Tokens& hyp, const std::vector<Tokens>& refs) {
  double best = 0.0;
  for (const auto& r : refs) best = std::max(best, rouge_l_f(lcs_length(hyp, r), hyp.size(), r.size()));
  return best;
}

inline std::vector<double> rouge_l_items(const std::vector<EvalPair>& corpus) {
  std::vector<double> out;
  for (const auto& p : corpus) {
    detail::require_references(p);
    std::vector<Tokens> refs;
    for (const auto& r : p.references) refs.push_back(tokenize(r));
    out.push_back(rouge_l_item(tokenize(p.hypothesis), refs));
  }
  return out;
}

inline double mean(const std::vector<double>& v) {
  double sum = 0.0;
  for (double x : v) sum += x;  // index order keeps reductions reproducible
  return v.empty() ? 0.0 : sum / static_cast<double>(v.size());
}

inline double rouge_l(const std::vector<EvalPair>& corpus) {
  detail::require_nonempty(corpus.size(), "rouge_l");
  return mean(rouge_l_items(corpus));
}

// --- METEOR ---------------------------------------------------------------

struct MeteorParams {
  double alpha = 0.9;
  double beta = 3.0;
  double gamma = 0.5;
  // Upper bound on alignments examined when repeated words make the
  // minimum-chunk search ambiguous; beyond it the occurrence-order pairing
  // (first hypothesis occurrence to first reference occurrence) is used.
  std::size_t search_budget = 20000;
};

// hyp position -> ref position, or -1.
using Alignment = std::vector<int>;

inline std::size_t count_chunks(const Alignment& a) {
  std::size_t chunks = 0;
  int prev_ref = -2;
  bool in_chunk = false;
  for (int r : a) {
    if (r < 0) {
      in_chunk = false;
      continue;
    }
    if (!in_chunk || r != prev_ref + 1) ++chunks;
    in_chunk = true;
    prev_ref = r;
  }
  return chunks;
}

namespace detail {

// One matching stage: tokens are grouped by a key (surface form or stem);
// within a group every injective pairing of min(|H|,|R|) tokens is a
// maximum matching. The search enumerates pairings group by group.
struct MeteorSearch {
  const Tokens& hyp_keys_exact;
  const Tokens& ref_keys_exact;
  const Tokens& hyp_keys_stem;
  const Tokens& ref_keys_stem;
  std::size_t budget;
  std::size_t visited = 0;
  bool exhausted = false;
  Alignment best;
  std::size_t best_chunks = SIZE_MAX;

  struct Group {
    std::vector<int> hyp;
    std::vector<int> ref;
  };

  static std::vector<Group> groups_for(const Tokens& hk, const Tokens& rk, const Alignment& a,
                                       const std::vector<bool>& ref_used) {
    std::map<std::string, Group> by_key;
    for (std::size_t i = 0; i < hk.size(); ++i)
      if (a[i] < 0) by_key[hk[i]].hyp.push_back(static_cast<int>(i));
    for (std::size_t j = 0; j < rk.size(); ++j)
      if (!ref_used[j]) {
        const auto it = by_key.find(rk[j]);
        if (it != by_key.end()) it->second.ref.push_back(static_cast<int>(j));
      }
    std::vector<Group> out;
    for (auto& [key, g] : by_key)
      if (!g.hyp.empty() && !g.ref.empty()) out.push_back(std::move(g));
    // Deterministic order: by first hypothesis position.
    std::sort(out.begin(), out.end(),
              [](const Group& x, const Group& y) { return x.hyp.front() < y.hyp.front(); });
    return out;
  }

  void run() {
    Alignment a(hyp_keys_exact.size(), -1);
    std::vector<bool> ref_used(ref_keys_exact.size(), false);
    stage(0, a, ref_used);
  }

  void stage(int which, Alignment& a, std::vector<bool>& ref_used) {
    if (which == 2) {
      ++visited;
      const std::size_t c = count_chunks(a);
      if (c < best_chunks) {
        best_chunks = c;
        best = a;
      }
      if (visited >= budget) exhausted = true;
      return;
    }
    const Tokens& hk = which == 0 ? hyp_keys_exact : hyp_keys_stem;
    const Tokens& rk = which == 0 ? ref_keys_exact : ref_keys_stem;
    const std::vector<Group> groups = groups_for(hk, rk, a, ref_used);
    assign(which, groups, 0, a, ref_used);
  }

  void assign(int which, const std::vector<Group>& groups, std::size_t gi, Alignment& a,
              std::vector<bool>& ref_used) {
    if (exhausted) return;
    if (gi == groups.size()) {
      stage(which + 1, a, ref_used);
      return;
    }
    const Group& g = groups[gi];
    const std::size_t take = std::min(g.hyp.size(), g.ref.size());
    // Choose which `take` hypothesis tokens match (ordered subsets) and which
    // reference token each gets. Occurrence-order pairing is tried first.
    std::vector<int> hyp_pick;
    std::vector<bool> ref_taken(g.ref.size(), false);
    pick(which, groups, gi, g, take, 0, hyp_pick, ref_taken, a, ref_used);
  }

  void pick(int which, const std::vector<Group>& groups, std::size_t gi, const Group& g,
            std::size_t take, std::size_t hyp_from, std::vector<int>& chosen,
            std::vector<bool>& ref_taken, Alignment& a, std::vector<bool>& ref_used) {
    if (exhausted) return;
    if (chosen.size() == take) {
      assign(which, groups, gi + 1, a, ref_used);
      return;
    }
    const std::size_t remaining = take - chosen.size();
    for (std::size_t h = hyp_from; h + remaining <= g.hyp.size(); ++h) {
      for (std::size_t r = 0; r < g.ref.size(); ++r) {
        if (ref_taken[r]) continue;
        ref_taken[r] = true;
        a[static_cast<std::size_t>(g.hyp[h])] = g.ref[r];
        ref_used[static_cast<std::size_t>(g.ref[r])] = true;
        chosen.push_back(g.hyp[h]);
        pick(which, groups, gi, g, take, h + 1, chosen, ref_taken, a, ref_used);
        chosen.pop_back();
        ref_used[static_cast<std::size_t>(g.ref[r])] = false;
        a[static_cast<std::size_t>(g.hyp[h])] = -1;
        ref_taken[r] = false;
        if (exhausted) return;
      }
    }
  }
};

}  // namespace detail

struct MeteorAlignment {
  Alignment alignment;
  std::size_t matches = 0;
  std::size_t chunks = 0;
};

// Exact-match stage followed by a Porter-stem stage over the leftovers.
// Among maximum matchings the one with the fewest chunks is kept.
inline MeteorAlignment meteor_align(const Tokens& hyp, const Tokens& ref,
                                    const MeteorParams& params = {}) {
  Tokens hs, rs;
  for (const auto& t : hyp) hs.push_back(text::porter_stem(t));
  for (const auto& t : ref) rs.push_back(text::porter_stem(t));
  detail::MeteorSearch search{hyp, ref, hs, rs, params.search_budget, 0, false, {}, SIZE_MAX};
  search.run();
  MeteorAlignment out;
  out.alignment = search.best;
  if (out.alignment.empty()) out.alignment.assign(hyp.size(), -1);
  for (int r : out.alignment) out.matches += r >= 0 ? 1 : 0;
  out.chunks = count_chunks(out.alignment);
  return out;
}

inline double meteor_score(std::size_t matches, std::size_t chunks, std::size_t hyp_len,
                           std::size_t ref_len, const MeteorParams& params = {}) {
  if (matches == 0 || hyp_len == 0 || ref_len == 0) return 0.0;
  const double m = static_cast<double>(matches);
  const double p = m / static_cast<double>(hyp_len);
  const double r = m / static_cast<double>(ref_len);
  const double f_mean = p * r / (params.alpha * p + (1.0 - params.alpha) * r);
  const double penalty = params.gamma * std::pow(static_cast<double>(chunks) / m, params.beta);
  return f_mean * (1.0 - penalty);
}

inline double meteor_item(const Tokens& hyp, const std::vector<Tokens>& refs,
                          const MeteorParams& params = {}) {
  double best = 0.0;
  for (const auto& r : refs) {
    const MeteorAlignment a = meteor_align(hyp, r, params);
    best = std::max(best, meteor_score(a.matches, a.chunks, hyp.size(), r.size(), params));
  }
  return best;
}

inline std::vector<double> meteor_items(const std::vector<EvalPair>& corpus,
                                        const MeteorParams& params = {}) {
  std::vector<double> out;
  for (const auto& p : corpus) {
    detail::require_references(p);
    std::vector<Tokens> refs;
    for (const auto& r : p.references) refs.push_back(tokenize(r));
    out.push_back(meteor_item(tokenize(p.hypothesis), refs, params));
  }
  return out;
}

inline double meteor_lite(const std::vector<EvalPair>& corpus, const MeteorParams& params = {}) {
  detail::require_nonempty(corpus.size(), "meteor_lite");
  return mean(meteor_items(corpus, params));
}

// --- CIDEr-D --------------------------------------------------------------

struct CiderParams {
  std::size_t max_n = 4;
  double sigma = 6.0;
};

namespace detail {

struct CiderVector {
  std::vector<std::map<Tokens, double>> weights;  // per n
  std::vector<double> norms2;  // squared L2 norm per n
  std::size_t length = 0;
};

inline CiderVector cider_vector(const Tokens& tokens, const std::map<Tokens, double>& idf,
                                std::size_t max_n) {
  CiderVector v;
  v.weights.resize(max_n);
  v.norms2.assign(max_n, 0.0);
  v.length = tokens.size();
  for (std::size_t n = 1; n <= max_n; ++n) {
    for (const auto& [gram, tf] : count_ngrams(tokens, n)) {
      const auto it = idf.find(gram);
      const double w = static_cast<double>(tf) * (it == idf.end() ? 0.0 : it->second);
      v.weights[n - 1][gram] = w;
      v.norms2[n - 1] += w * w;
    }
  }
  return v;
}

}  // namespace detail

// Document frequency over the references of the evaluation corpus:
// idf(g) = log(N / max(1, #items whose references contain g)).
inline std::map<Tokens, double> cider_idf(const std::vector<std::vector<Tokens>>& refs_per_item,
                                          std::size_t max_n = 4) {
  std::map<Tokens, std::int64_t> df;
  for (const auto& refs : refs_per_item) {
    std::set<Tokens> seen;
    for (const auto& r : refs)
      for (std::size_t n = 1; n <= max_n; ++n)
        for (const auto& [gram, c] : count_ngrams(r, n)) seen.insert(gram);
    for (const auto& g : seen) ++df[g];
  }
  const double n_items = static_cast<double>(refs_per_item.size());
  std::map<Tokens, double> idf;
  for (const auto& [g, d] : df)
    idf[g] = std::log(n_items / std::max(1.0, static_cast<double>(d)));
  return idf;
}

inline std::vector<double> cider_d_items(const std::vector<EvalPair>& corpus,
                                         const CiderParams& params = {}) {
  std::vector<std::vector<Tokens>> refs_per_item;
  for (const auto& p : corpus) {
    detail::require_references(p);
    std::vector<Tokens> refs;
    for (const auto& r : p.references) refs.push_back(tokenize(r));
    refs_per_item.push_back(std::move(refs));
  }
  const auto idf = cider_idf(refs_per_item, params.max_n);
  std::vector<double> out;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto hv = detail::cider_vector(tokenize(corpus[i].hypothesis), idf, params.max_n);
    double total = 0.0;
    for (const auto& r : refs_per_item[i]) {
      const auto rv = detail::cider_vector(r, idf, params.max_n);
      const double delta = static_cast<double>(hv.length) - static_cast<double>(rv.length);
      const double penalty = std::exp(-(delta * delta) / (2.0 * params.sigma * params.sigma));
      double per_n_sum = 0.0;
      for (std::size_t n = 0; n < params.max_n; ++n) {
        if (hv.norms2[n] == 0.0 || rv.norms2[n] == 0.0) continue;
        double dot = 0.0;
        for (const auto& [gram, w] : hv.weights[n]) {
          const auto it = rv.weights[n].find(gram);
          if (it != rv.weights[n].end()) dot += std::min(w, it->second) * it->second;
        }
        per_n_sum += dot / std::sqrt(hv.norms2[n] * rv.norms2[n]) * penalty;
      }
      total += per_n_sum / static_cast<double>(params.max_n);
    }
    out.push_back(10.0 * total / static_cast<double>(refs_per_item[i].size()));
  }
  return out;
}

inline double cider_d(const std::vector<EvalPair>& corpus, const CiderParams& params = {}) {
  detail::require_nonempty(corpus.size(), "cider_d");
  return mean(cider_d_items(corpus, params));
}

// --- composition ------------------------------------------------------------

// 100 * weighted mean of (BLEU-4, METEOR, ROUGE-L, CIDEr/10).
inline double caption_score(double bleu, double meteor, double rouge, double cider,
                            const ScoreWeights& w = {}) {
  const double total = w.bleu4 + w.meteor + w.rouge_l + w.cider;
  if (total <= 0.0) throw ValidationError("caption score weights must sum to a positive value");
  return 100.0 * (w.bleu4 * bleu + w.meteor * meteor + w.rouge_l * rouge + w.cider * cider / 10.0) /
         total;
}

inline double caption_score(const MetricReport& r, const ScoreWeights& w = {}) {
  return caption_score(r.bleu4, r.meteor, r.rouge_l, r.cider, w);
}

inline double final_score(double caption, double vqa_acc) {
  if (caption < 0 || caption > 100 || vqa_acc < 0 || vqa_acc > 1)
    throw ValidationError("final_score inputs out of range");
  return (caption + 100.0 * vqa_acc) / 2.0;
}

inline MetricReport evaluate_corpus(const std::vector<EvalPair>& corpus,
                                    const ScoreWeights& weights = {}) {
  detail::require_nonempty(corpus.size(), "evaluate");
  MetricReport r;
  r.bleu4 = bleu4(corpus);
  r.meteor = meteor_lite(corpus);
  r.rouge_l = rouge_l(corpus);
  r.cider = cider_d(corpus);
  r.caption_score = caption_score(r, weights);
  r.n_items = static_cast<std::int64_t>(corpus.size());
  return r;
}

// --- VQA --------------------------------------------------------------------

// First standalone letter (case-insensitive, bounded by non-alphanumerics)
// that is one of the valid keys, scanning left to right.
inline std::optional<std::string> extract_answer(std::string_view text,
                                                 const std::vector<std::string>& valid_keys) {
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (!text::is_alnum(text[i])) continue;
    const bool left_ok = i == 0 || !text::is_alnum(text[i - 1]);
    const bool right_ok = i + 1 == text.size() || !text::is_alnum(text[i + 1]);
    if (!left_ok || !right_ok) continue;
    const std::string key(1, static_cast<char>(std::toupper(static_cast<unsigned char>(text[i]))));
    if (std::find(valid_keys.begin(), valid_keys.end(), key) != valid_keys.end()) return key;
  }
  return std::nullopt;
}

inline std::vector<std::string> valid_keys(const VqaItem& item) {
  std::vector<std::string> keys;
  for (std::size_t i = 0; i < item.choices.size(); ++i) keys.push_back(choice_key(i));
  return keys;
}

struct VqaOutcome {
  VqaItem item;
  std::string model_output;
};

inline double vqa_accuracy(const std::vector<VqaOutcome>& items) {
  detail::require_nonempty(items.size(), "vqa_accuracy");
  std::size_t correct = 0;
  for (const auto& o : items) {
    const auto answer = extract_answer(o.model_output, valid_keys(o.item));
    if (answer && *answer == o.item.correct) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(items.size());
}

inline json to_json(const MetricReport& r) {
  return {{"bleu4", r.bleu4},   {"meteor", r.meteor},
          {"rouge_l", r.rouge_l}, {"cider", r.cider},
          {"caption_score", r.caption_score}, {"n_items", r.n_items}};
}

}  // namespace ster::metrics
