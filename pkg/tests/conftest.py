import hypothesis

# Deterministic, CI-friendly hypothesis runs: the suite doubles as the
# acceptance gate, so flaky example generation is not acceptable here.
hypothesis.settings.register_profile(
    "fusebench",
    deadline=None,
    derandomize=True,
    max_examples=60,
)
hypothesis.settings.load_profile("fusebench")
