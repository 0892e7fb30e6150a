"""Small model specs and analytic parameter counts shared by the tests."""

from agegender.models import attention_net_spec, resnet_lite_spec


def tiny_attention_spec(**overrides):
    base = dict(input_size=8, stem_channels=4, stage_channels=(4,), mask_levels=(1,), trunk_depth=1,
                embedding_dim=6, age_hidden=5)
    base.update(overrides)
    return attention_net_spec(**base)


def tiny_resnet_spec(**overrides):
    base = dict(input_size=8, stem_channels=4, stage_channels=(4, 6), units_per_stage=1,
                embedding_dim=6, age_hidden=5)
    base.update(overrides)
    return resnet_lite_spec(**base)


def small_attention_spec(**overrides):
    """Three modules at unit-test scale (32x32 input)."""
    base = dict(input_size=32, stem_channels=4, stage_channels=(4, 8, 8), mask_levels=(1, 1, 1),
                trunk_depth=1, embedding_dim=8, age_hidden=8)
    base.update(overrides)
    return attention_net_spec(**base)


# -- hand-summed layer table ------------------------------------------------------

def conv(cin, cout, k, bias=False):
    return cin * cout * k * k + (cout if bias else 0)


def bn(c):
    return 2 * c


def residual(cin, cout, stride=1):
    n = conv(cin, cout, 3) + bn(cout) + conv(cout, cout, 3) + bn(cout)
    if cin != cout or stride != 1:
        n += conv(cin, cout, 1) + bn(cout)
    return n


def attention_module(c, trunk, levels):
    # trunk units, one unit per descent and per ascent level, 1x1 conv head with bias
    return trunk * residual(c, c) + 2 * levels * residual(c, c) + conv(c, c, 1, bias=True)


def heads(e, b=11, hidden=64, augmented=True):
    dense = lambda f, g: f * g + g
    return dense(e, 2) + dense(e + (2 if augmented else 0), hidden) + dense(hidden, b)


def attention_net_count(stem=32, stages=(32, 64, 128), levels=(2, 2, 1), trunk=2, emb=256, **head_kw):
    n = conv(3, stem, 7) + bn(stem)
    cin = stem
    for i, (c, lv) in enumerate(zip(stages, levels)):
        if cin != c:
            n += residual(cin, c)
        n += attention_module(c, trunk, lv)
        cout = stages[i + 1] if i + 1 < len(stages) else emb
        n += residual(c, cout, 2)
        cin = cout
    return n + heads(emb, **head_kw)


def resnet_lite_count(stem=64, stages=(64, 128, 256, 512), units=2, **head_kw):
    n = conv(3, stem, 7) + bn(stem)
    cin = stem
    for si, c in enumerate(stages):
        for u in range(units):
            n += residual(cin, c, 2 if (u == 0 and si > 0) else 1)
            cin = c
    return n + heads(stages[-1], **head_kw)
