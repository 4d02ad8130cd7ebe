#include "fairdistill/report.hpp"

#include <cmath>
#include <map>

namespace fd {

using nlohmann::json;

std::vector<double> BiasReport::raw(std::string_view metric) const {
  std::vector<double> out;
  for (const auto& s : scores)
    if (s.metric == metric) out.push_back(s.score);
  return out;
}

Aggregate BiasReport::aggregate(std::string_view metric) const {
  const auto v = raw(metric);
  Aggregate a;
  a.count = v.size();
  if (v.empty()) return a;
  double sum = 0;
  for (double x : v) sum += x;
  a.mean = sum / static_cast<double>(v.size());
  double var = 0;
  for (double x : v) var += (x - a.mean) * (x - a.mean);
  a.std = std::sqrt(var / static_cast<double>(v.size()));
  return a;
}

json reference_values() {
  const char* tag = "not verified at desk scale";
  auto row = [&](const char* model, json values) {
    values["model"] = model;
    values["status"] = tag;
    return values;
  };
  json english = json::array({
      row("BERT-base (teacher)", {{"lpbs", 1.16}, {"disco", -0.48}, {"imdb_accuracy", 93.5}}),
      row("DistilBERT", {{"lpbs", -0.27}, {"disco", -0.55}, {"imdb_accuracy", 92.82}}),
      row("rule-distilled (BERT teacher)",
          {{"lpbs", -0.16}, {"disco", 0.25}, {"imdb_accuracy", 85.5},
           {"imdb_accuracy_std", 0.4}}),
  });
  json dutch = json::array({
      row("RobBERT (teacher)", {{"mrd", -7.47}, {"lpbs", 1.13}, {"disco", -0.29}}),
      row("RobBERTje", {{"mrd", -6.66}, {"lpbs", -0.45}, {"disco", -0.41}}),
      row("rule-distilled (RobBERT teacher)",
          {{"mrd", -3.98}, {"lpbs", 1.14}, {"disco", -0.08}}),
  });
  return {{"english", english},
          {"dutch", dutch},
          {"note",
           "published scores for pretrained full-size teachers; desk-scale runs "
           "only check the direction of the effect"}};
}

json BiasReport::to_json() const {
  json out;
  out["metadata"] = metadata;
  json rows = json::array();
  std::map<std::string, bool> metrics;
  for (const auto& s : scores) {
    rows.push_back({{"metric", s.metric},
                    {"template", s.template_text},
                    {"attribute", s.attribute},
                    {"score", s.score},
                    {"flagged", s.flagged}});
    metrics[s.metric] = true;
  }
  out["scores"] = rows;
  json aggregates = json::object();
  for (const auto& [metric, _] : metrics) {
    const auto a = aggregate(metric);
    json block = {{"mean", a.mean}, {"std", a.std}, {"count", a.count}};
    if (metric == "disco") {
      double mean_abs = 0;
      for (double x : raw(metric)) mean_abs += std::abs(x);
      block["abs_mean"] = std::abs(a.mean);
      block["mean_abs"] = mean_abs / static_cast<double>(a.count);
    }
    aggregates[metric] = block;
  }
  out["aggregates"] = aggregates;
  if (seat_evaluated)
    out["seat"] = seat ? json(*seat) : json("undefined (zero variance)");
  out["skipped"] = skipped;
  out["reference_values"] = reference_values();
  return out;
}

BiasReport evaluate_bias(const MaskedLanguageModel& model, const Vocabulary& vocab,
                         std::span<const Template> templates,
                         std::span<const AttributeEntry> attributes,
                         const BiasEvalConfig& config) {
  if (templates.empty()) throw InputError("no templates given");
  if (attributes.empty()) throw InputError("attribute list is empty");
  const auto he = vocab.find(vocab.normalize(config.he));
  const auto she = vocab.find(vocab.normalize(config.she));
  if (!he || !she)
    throw InputError("pronouns '" + config.he + "'/'" + config.she +
                     "' must both be in the vocabulary");
  if (config.run_disco && (config.disco_k == 0 || config.disco_k > vocab.size()))
    throw ConfigError("disco k must lie in [1, " + std::to_string(vocab.size()) + "]");

  BiasReport report;
  report.metadata["parameters"] = {{"he", config.he},
                                   {"she", config.she},
                                   {"disco_k", config.disco_k},
                                   {"disco_candidates", "union of top-k fills"},
                                   {"mrd_tie_break", "lower token id ranks first"},
                                   {"prob_floor", kProbFloor}};

  std::vector<const AttributeEntry*> usable;
  for (const auto& a : attributes) {
    const auto probe = render(templates.front(), vocab, a.phrase);
    if (probe.attribute_unknown)
      report.skipped.push_back(a.phrase);
    else
      usable.push_back(&a);
  }

  for (const auto& t : templates) {
    std::vector<RenderedTemplate> filled;
    for (const auto* a : usable) filled.push_back(render(t, vocab, a->phrase));
    for (std::size_t i = 0; i < filled.size(); ++i) {
      const auto& f = filled[i];
      const auto& name = usable[i]->phrase;
      if (config.run_lpbs) {
        const auto s = lpbs(model, f, *he, *she);
        report.scores.push_back({"lpbs", t.text, name, s.value, s.flagged});
      }
      if (config.run_gap || config.run_mrd) {
        const auto p = model.masked_distribution(f.ids, f.target_pos);
        if (config.run_gap)
          report.scores.push_back(
              {"prob_gap", t.text, name,
               std::abs(p[static_cast<std::size_t>(*he)] -
                        p[static_cast<std::size_t>(*she)]),
               false});
        if (config.run_mrd)
          report.scores.push_back({"mrd", t.text, name,
                                   static_cast<double>(rank_difference(p, *he, *she)),
                                   false});
      }
    }
    if (config.run_disco) {
      const auto ctx_a = render_swapped(t, vocab, config.he);
      const auto ctx_b = render_swapped(t, vocab, config.she);
      report.scores.push_back({"disco", t.text, config.he + "/" + config.she,
                               disco_simplified(model, ctx_a, ctx_b, config.disco_k),
                               false});
    }
  }

  if (config.seat_sets) {
    report.seat_evaluated = true;
    report.seat = seat(model, vocab, *config.seat_sets, config.bleached);
  }
  return report;
}

}  // namespace fd
