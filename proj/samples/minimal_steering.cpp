// End-to-end use of the library API on the reference backend: attribute one
// user's history, smooth the anchors, and steer a generation both ways.

#include <steerx/attribution.hpp>
#include <steerx/smoothing.hpp>
#include <steerx/steering.hpp>
#include <steerx/table_lm.hpp>

#include <iostream>

int main() {
  steerx::TableLmSpec spec;
  spec.vocabulary = {"loved", "noir", "style", "plot", "the", "fine"};
  spec.boost = 3.0;
  steerx::TableLm backend(spec);

  std::vector<std::string> history = {"loved the noir style", "noir plot loved"};
  std::string context = "the";

  auto loo = steerx::leave_one_out_attribution(history, context, backend,
                                               steerx::SelectionRule::threshold(0.3));
  std::vector<steerx::AnchorSet> anchor_sets;
  for (const auto& entry : loo) {
    std::cout << "history " << entry.history_index << ": ";
    for (const auto& anchor : entry.anchors.tokens)
      std::cout << anchor.token << "(delta=" << anchor.delta << ") ";
    std::cout << '\n';
    anchor_sets.push_back(entry.anchors);
  }

  steerx::SmoothingOptions smoothing;
  steerx::StyleProfile profile = steerx::build_style_profile(anchor_sets, smoothing);
  std::string s_text = steerx::profile_text(profile);
  std::cout << "style text:\n" << s_text << '\n';

  std::string steered =
      steerx::steer_iv_generate("the", history[0], s_text, "", 0.8, backend, 4);
  std::cout << "IV-steered: " << steered << '\n';

  std::vector<steerx::HistoryPair> pairs;
  for (const auto& h : history)
    pairs.push_back({h, steerx::neutral_response("the", "", backend, 4)});
  steerx::StyleVector sv = steerx::style_vector(pairs, profile, 0.4, 0, backend);
  std::cout << "SV-steered: "
            << steerx::steer_sv_generate("the", history[0], "", sv, 2.0, backend, 4) << '\n';
  return 0;
}
