#include "fairdistill/bias.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace fd {

namespace {

std::string read_text(const std::filesystem::path& path, const char* what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError(std::string("cannot read ") + what + " " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> content_lines(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos || line[first] == '#') continue;
    out.push_back(line);
  }
  return out;
}

TokenId required_id(const Vocabulary& vocab, std::string_view word,
                    std::string_view context) {
  const auto id = vocab.find(vocab.normalize(word));
  if (!id)
    throw InputError("word '" + std::string(word) + "' in '" + std::string(context) +
                     "' is not in the vocabulary");
  return *id;
}

double cosine(const std::vector<double>& u, const std::vector<double>& v) {
  if (u.size() != v.size()) throw DimensionError("embedding sizes differ");
  double dot = 0, nu = 0, nv = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    nu += u[i] * u[i];
    nv += v[i] * v[i];
  }
  if (nu == 0 || nv == 0) throw NumericError("cosine of a zero vector");
  return dot / std::sqrt(nu * nv);
}

}  // namespace

Template parse_template(std::string_view line) {
  Template t;
  t.words = split_whitespace(line);
  std::size_t n_target = 0, n_attr = 0;
  for (std::size_t i = 0; i < t.words.size(); ++i) {
    if (t.words[i] == kTargetSlot) {
      t.target_slot = i;
      ++n_target;
    } else if (t.words[i] == kAttributeSlot) {
      t.attribute_slot = i;
      ++n_attr;
    }
  }
  if (n_target != 1 || n_attr != 1)
    throw InputError("template '" + std::string(line) +
                     "' needs exactly one <mask> and one <P>");
  for (std::size_t i = 0; i < t.words.size(); ++i) {
    if (i) t.text += ' ';
    t.text += t.words[i];
  }
  return t;
}

std::vector<Template> parse_templates(std::string_view text) {
  std::vector<Template> out;
  for (const auto& line : content_lines(text)) out.push_back(parse_template(line));
  if (out.empty()) throw InputError("no templates given");
  return out;
}

std::vector<Template> load_templates(const std::filesystem::path& path) {
  return parse_templates(read_text(path, "template file"));
}

std::vector<AttributeEntry> parse_attributes(std::string_view text) {
  std::vector<AttributeEntry> out;
  for (const auto& line : content_lines(text)) {
    AttributeEntry e;
    const auto tab = line.find('\t');
    const auto words = split_whitespace(line.substr(0, tab));
    for (std::size_t i = 0; i < words.size(); ++i)
      e.phrase += (i ? " " : "") + words[i];
    if (tab != std::string::npos) {
      const std::string score = line.substr(tab + 1);
      std::size_t used = 0;
      double g = 0;
      try {
        g = std::stod(score, &used);
      } catch (const std::exception&) {
        throw InputError("bad perceived-gender score '" + score + "'");
      }
      if (score.find_first_not_of(" \t", used) != std::string::npos || g < -1 || g > 1)
        throw InputError("perceived-gender score must be a number in [-1, 1]: '" +
                         score + "'");
      e.perceived_gender = g;
    }
    if (e.phrase.empty()) throw InputError("empty attribute phrase");
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<AttributeEntry> load_attributes(const std::filesystem::path& path) {
  return parse_attributes(read_text(path, "attribute list"));
}

RenderedTemplate render(const Template& tmpl, const Vocabulary& vocab,
                        std::string_view attribute) {
  const auto attr_words = split_whitespace(attribute);
  if (attr_words.empty()) throw InputError("empty attribute phrase");
  RenderedTemplate r;
  r.ids.push_back(kClsId);
  for (std::size_t i = 0; i < tmpl.words.size(); ++i) {
    if (i == tmpl.target_slot) {
      r.target_pos = r.ids.size();
      r.ids.push_back(kMaskId);
    } else if (i == tmpl.attribute_slot) {
      for (const auto& w : attr_words) {
        const TokenId id = vocab.id_or_unk(w);
        r.attribute_unknown = r.attribute_unknown || id == kUnkId;
        r.attribute_pos.push_back(r.ids.size());
        r.ids.push_back(id);
      }
    } else {
      r.ids.push_back(required_id(vocab, tmpl.words[i], tmpl.text));
    }
  }
  r.ids.push_back(kSepId);
  return r;
}

RenderedTemplate render_swapped(const Template& tmpl, const Vocabulary& vocab,
                                std::string_view filler) {
  Template swapped = tmpl;
  std::swap(swapped.target_slot, swapped.attribute_slot);
  return render(swapped, vocab, filler);
}

MetricScore lpbs_from_probs(double tgt_a, double prior_a, double tgt_b,
                            double prior_b) {
  MetricScore s;
  auto floored = [&](double p) {
    if (!(p > kProbFloor)) {
      s.flagged = true;
      return kProbFloor;
    }
    return p;
  };
  const double la = std::log(floored(tgt_a)) - std::log(floored(prior_a));
  const double lb = std::log(floored(tgt_b)) - std::log(floored(prior_b));
  s.value = la - lb;
  return s;
}

MetricScore lpbs(const MaskedLanguageModel& model, const RenderedTemplate& filled,
                 TokenId a, TokenId b) {
  const auto p_tgt = model.masked_distribution(filled.ids, filled.target_pos);
  auto prior_ids = filled.ids;
  for (std::size_t pos : filled.attribute_pos) prior_ids[pos] = kMaskId;
  const auto p_prior = model.masked_distribution(prior_ids, filled.target_pos);
  const auto ia = static_cast<std::size_t>(a), ib = static_cast<std::size_t>(b);
  if (ia >= p_tgt.size() || ib >= p_tgt.size())
    throw IndexError("target token outside the model vocabulary");
  return lpbs_from_probs(p_tgt[ia], p_prior[ia], p_tgt[ib], p_prior[ib]);
}

std::vector<TokenId> top_k(std::span<const double> probs, std::size_t k) {
  if (k == 0 || k > probs.size())
    throw ConfigError("top-k needs 1 <= k <= V (k = " + std::to_string(k) +
                      ", V = " + std::to_string(probs.size()) + ")");
  std::vector<TokenId> ids(probs.size());
  std::iota(ids.begin(), ids.end(), TokenId{0});
  std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k),
                    ids.end(), [&](TokenId i, TokenId j) {
                      const double pi = probs[static_cast<std::size_t>(i)];
                      const double pj = probs[static_cast<std::size_t>(j)];
                      return pi > pj || (pi == pj && i < j);
                    });
  ids.resize(k);
  return ids;
}

double disco_from_distributions(std::span<const double> p_a,
                                std::span<const double> p_b, std::size_t k) {
  if (p_a.size() != p_b.size())
    throw DimensionError("DisCo distributions differ in size");
  std::set<TokenId> fills;
  for (TokenId t : top_k(p_a, k)) fills.insert(t);
  for (TokenId t : top_k(p_b, k)) fills.insert(t);
  double s = 0;
  for (TokenId t : fills)
    s += p_a[static_cast<std::size_t>(t)] - p_b[static_cast<std::size_t>(t)];
  return s;
}

double disco_simplified(const MaskedLanguageModel& model,
                        const RenderedTemplate& ctx_a,
                        const RenderedTemplate& ctx_b, std::size_t k) {
  const auto pa = model.masked_distribution(ctx_a.ids, ctx_a.target_pos);
  const auto pb = model.masked_distribution(ctx_b.ids, ctx_b.target_pos);
  return disco_from_distributions(pa, pb, k);
}

std::size_t rank_of(std::span<const double> probs, TokenId token) {
  const auto t = static_cast<std::size_t>(token);
  if (token < 0 || t >= probs.size())
    throw IndexError("token id " + std::to_string(token) + " outside vocabulary");
  const double pt = probs[t];
  std::size_t better = 0;
  for (std::size_t j = 0; j < probs.size(); ++j)
    if (probs[j] > pt || (probs[j] == pt && j < t)) ++better;
  return better + 1;
}

long rank_difference(std::span<const double> probs, TokenId he, TokenId she) {
  return static_cast<long>(rank_of(probs, he)) - static_cast<long>(rank_of(probs, she));
}

MrdResult mrd(const MaskedLanguageModel& model,
              std::span<const RenderedTemplate> filled, TokenId he, TokenId she) {
  if (filled.empty()) throw InputError("MRD needs at least one profession");
  MrdResult r;
  double total = 0;
  for (const auto& f : filled) {
    const auto p = model.masked_distribution(f.ids, f.target_pos);
    const long d = rank_difference(p, he, she);
    r.differences.push_back(d);
    total += static_cast<double>(d);
  }
  r.mean = total / static_cast<double>(filled.size());
  return r;
}

std::optional<double> seat_effect_size(std::span<const std::vector<double>> x,
                                       std::span<const std::vector<double>> y,
                                       std::span<const std::vector<double>> a,
                                       std::span<const std::vector<double>> b) {
  if (x.empty() || y.empty() || a.empty() || b.empty())
    throw InputError("SEAT word sets must be non-empty");
  auto assoc = [&](const std::vector<double>& w) {
    double sa = 0, sb = 0;
    for (const auto& v : a) sa += cosine(w, v);
    for (const auto& v : b) sb += cosine(w, v);
    return sa / static_cast<double>(a.size()) - sb / static_cast<double>(b.size());
  };
  std::vector<double> sx, sy;
  for (const auto& w : x) sx.push_back(assoc(w));
  for (const auto& w : y) sy.push_back(assoc(w));
  const auto mean = [](const std::vector<double>& v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  };
  std::vector<double> all = sx;
  all.insert(all.end(), sy.begin(), sy.end());
  const double mu = mean(all);
  double var = 0;
  for (double s : all) var += (s - mu) * (s - mu);
  var /= static_cast<double>(all.size());
  if (var == 0) return std::nullopt;
  return (mean(sx) - mean(sy)) / std::sqrt(var);
}

std::vector<double> word_embedding(const MaskedLanguageModel& model,
                                   const Vocabulary& vocab, std::string_view word,
                                   std::span<const std::string> bleached) {
  if (bleached.empty()) throw InputError("no bleached templates");
  const TokenId wid = required_id(vocab, word, "SEAT word list");
  std::vector<double> sum;
  for (const auto& line : bleached) {
    const auto words = split_whitespace(line);
    std::vector<TokenId> ids{kClsId};
    std::optional<std::size_t> slot;
    for (const auto& w : words) {
      if (w == kWordSlot) {
        if (slot) throw InputError("bleached template '" + line + "' has two <w> slots");
        slot = ids.size();
        ids.push_back(wid);
      } else {
        ids.push_back(required_id(vocab, w, line));
      }
    }
    if (!slot) throw InputError("bleached template '" + line + "' has no <w> slot");
    ids.push_back(kSepId);
    const auto h = model.hidden_state(ids, *slot);
    if (sum.empty()) sum.assign(h.size(), 0.0);
    for (std::size_t i = 0; i < h.size(); ++i) sum[i] += h[i];
  }
  for (double& v : sum) v /= static_cast<double>(bleached.size());
  return sum;
}

SeatSets parse_seat_sets(std::string_view text) {
  SeatSets s;
  for (const auto& line : content_lines(text)) {
    const auto colon = line.find(':');
    if (colon == std::string::npos)
      throw InputError("SEAT set line '" + line + "' lacks a 'X:' style label");
    const auto label = split_whitespace(line.substr(0, colon));
    const auto words = split_whitespace(line.substr(colon + 1));
    if (label.size() != 1) throw InputError("bad SEAT set label in '" + line + "'");
    std::vector<std::string>* dst = label[0] == "X"   ? &s.x
                                    : label[0] == "Y" ? &s.y
                                    : label[0] == "A" ? &s.a
                                    : label[0] == "B" ? &s.b
                                                      : nullptr;
    if (!dst) throw InputError("unknown SEAT set '" + label[0] + "'");
    dst->insert(dst->end(), words.begin(), words.end());
  }
  if (s.x.empty() || s.y.empty() || s.a.empty() || s.b.empty())
    throw InputError("SEAT needs non-empty X, Y, A and B sets");
  return s;
}

std::optional<double> seat(const MaskedLanguageModel& model, const Vocabulary& vocab,
                           const SeatSets& sets,
                           std::span<const std::string> bleached) {
  auto embed_all = [&](const std::vector<std::string>& words) {
    std::vector<std::vector<double>> out;
    for (const auto& w : words) out.push_back(word_embedding(model, vocab, w, bleached));
    return out;
  };
  const auto x = embed_all(sets.x), y = embed_all(sets.y);
  const auto a = embed_all(sets.a), b = embed_all(sets.b);
  return seat_effect_size(x, y, a, b);
}

}  // namespace fd
