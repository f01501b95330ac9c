"""Named training presets, one per benchmark or recording type."""

RECIPE_REGISTRY = {}


def register_recipe(name):
    def register_recipe_fn(fn):
        if name in RECIPE_REGISTRY:
            raise ValueError(f"Cannot register duplicate recipe ({name})")
        RECIPE_REGISTRY[name] = fn
        return fn

    return register_recipe_fn


def _settings(M, B_bases, tau, lambda_mar=0.0, m_reg_fraction=0.0, **extra):
    settings = {
        "M": M,
        "B_bases": B_bases,
        "tau": tau,
        "lambda_mar": lambda_mar,
        "m_reg": int(round(m_reg_fraction * M)),
    }
    settings.update(extra)
    return settings


@register_recipe("lorenz63")
def lorenz63_recipe():
    return _settings(22, 20, 25, seq_len=200)


@register_recipe("lorenz96")
def lorenz96_recipe():
    return _settings(50, 30, 10)


@register_recipe("bursting_neuron")
def bursting_neuron_recipe():
    return _settings(26, 47, 5)


@register_recipe("neural_population")
def neural_population_recipe():
    return _settings(75, 40, 5)


@register_recipe("wilson_cowan")
def wilson_cowan_recipe():
    return _settings(5, 20, 15, lambda_mar=5e-3, m_reg_fraction=0.5)


@register_recipe("eeg")
def eeg_recipe():
    return _settings(128, 50, 10, lambda_mar=5e-3, m_reg_fraction=0.1)


@register_recipe("ecg")
def ecg_recipe():
    return _settings(30, 50, 10)


def recipe_settings(name: str, overrides: dict | None = None) -> dict:
    """Preset training settings with explicit overrides applied on top.

    Args:
        name (str): Registered recipe name
        overrides (dict): Training fields that win over the preset

    Returns:
        dict: Training section suitable for TrainConfig.from_dict
    """
    if name not in RECIPE_REGISTRY:
        raise KeyError(f"unknown recipe '{name}', choose from {sorted(RECIPE_REGISTRY)}")
    settings = RECIPE_REGISTRY[name]()
    settings.update(overrides or {})
    return settings
