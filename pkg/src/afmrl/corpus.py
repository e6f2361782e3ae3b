"""Synthetic e-commerce product universe with planted fine-grained hard negatives.

Products are organised as category -> family -> group -> product. All products in
a group are the same item (identical attributes) seen through different noisy
views. Groups inside one family are siblings: they share a prototype attribute
assignment and differ from each other in one or two keys, so they are close in
both title and image space.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

INSTRUCTIONS = ("i2t", "t2i", "product")

DEFAULT_VALUES = {
    "color": ("red", "blue", "black", "white", "green", "beige"),
    "material": ("cotton", "silk", "suede", "leather", "denim", "wool"),
    "size": ("xs", "s", "m", "l", "xl", "xxl"),
    "series": ("classic", "sport", "lite", "pro", "retro", "urban"),
    "brand": ("acme", "nova", "orion", "zenith", "apex", "lumen"),
}

MARKETING_TOKENS = tuple(
    "new hot sale free-shipping limited best-seller premium official genuine "
    "trendy classic-fit gift 2024 deal exclusive fast-delivery quality "
    "top-rated original discount bundle popular fashion luxury casual "
    "comfortable lightweight durable stylish must-have".split()
)


class ConfigError(ValueError):
    """Raised for invalid configuration values."""


class UniverseParseError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


@dataclass(frozen=True)
class AttributeSchema:
    keys: tuple[str, ...]
    values_per_key: dict[str, tuple[str, ...]]

    def __post_init__(self):
        if not self.keys:
            raise ConfigError("schema needs at least one key")
        for key in self.keys:
            vals = self.values_per_key.get(key, ())
            if len(set(vals)) < 2:
                raise ConfigError(f"attribute key {key!r} needs >=2 distinct values")

    @classmethod
    def default(cls) -> "AttributeSchema":
        return cls(tuple(DEFAULT_VALUES), dict(DEFAULT_VALUES))

    def all_tokens(self) -> list[str]:
        return [attr_token(k, v) for k in self.keys for v in self.values_per_key[k]]

    def tokens_of(self, attributes: dict[str, str]) -> list[str]:
        return [attr_token(k, attributes[k]) for k in self.keys]


def attr_token(key: str, value: str) -> str:
    return f"{key}={value}"


@dataclass(frozen=True)
class UniverseConfig:
    n_categories: int = 10
    families_per_category: int = 5
    groups_per_family: int = 4
    products_per_group: int = 10
    d_img: int = 16
    text_noise_tokens: int = 4
    # probability that a title mentions a given attribute; 1.0 = full titles
    title_attr_keep: float = 0.5
    image_noise_std: float = 0.35
    category_scale: float = 1.0
    family_scale: float = 0.6
    attribute_scale: float = 0.35
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_categories", "families_per_category", "groups_per_family",
                     "products_per_group", "d_img"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.text_noise_tokens < 0:
            raise ConfigError("text_noise_tokens must be >= 0")
        if not 0.0 <= self.title_attr_keep <= 1.0:
            raise ConfigError("title_attr_keep must lie in [0, 1]")
        for name in ("image_noise_std", "category_scale", "family_scale", "attribute_scale"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")


@dataclass(frozen=True)
class Product:
    id: int
    category: int
    group_id: int
    family_id: int
    attributes: dict[str, str]
    text_tokens: tuple[str, ...]
    image_vec: tuple[float, ...]

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "category": self.category,
            "group_id": self.group_id,
            "family_id": self.family_id,
            "attributes": dict(self.attributes),
            "text_tokens": list(self.text_tokens),
            "image_vec": [float(x) for x in self.image_vec],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Product":
        return cls(
            id=int(obj["id"]),
            category=int(obj["category"]),
            group_id=int(obj["group_id"]),
            family_id=int(obj["family_id"]),
            attributes={str(k): str(v) for k, v in obj["attributes"].items()},
            text_tokens=tuple(str(t) for t in obj["text_tokens"]),
            image_vec=tuple(float(x) for x in obj["image_vec"]),
        )


@dataclass(frozen=True)
class TrainingPair:
    query_id: int
    positive_id: int
    instruction: str


@dataclass(frozen=True, eq=False)
class ProductUniverse:
    schema: AttributeSchema
    products: tuple[Product, ...]
    _by_id: dict[int, Product] = field(init=False, repr=False)
    _groups: dict[int, tuple[int, ...]] = field(init=False, repr=False)
    _families: dict[int, tuple[int, ...]] = field(init=False, repr=False)

    def __post_init__(self):
        by_id = {p.id: p for p in self.products}
        if len(by_id) != len(self.products):
            raise ValueError("duplicate product ids")
        groups: dict[int, list[int]] = {}
        families: dict[int, set[int]] = {}
        for p in sorted(self.products, key=lambda p: p.id):
            groups.setdefault(p.group_id, []).append(p.id)
            families.setdefault(p.family_id, set()).add(p.group_id)
        object.__setattr__(self, "_by_id", by_id)
        object.__setattr__(self, "_groups", {g: tuple(v) for g, v in sorted(groups.items())})
        object.__setattr__(
            self, "_families", {f: tuple(sorted(v)) for f, v in sorted(families.items())}
        )

    def __eq__(self, other):
        if not isinstance(other, ProductUniverse):
            return NotImplemented
        return self._by_id == other._by_id

    def __len__(self):
        return len(self.products)

    def product(self, pid: int) -> Product:
        try:
            return self._by_id[pid]
        except KeyError:
            raise KeyError(f"unknown product id {pid}") from None

    @property
    def group_ids(self) -> list[int]:
        return list(self._groups)

    @property
    def family_ids(self) -> list[int]:
        return list(self._families)

    def group_members(self, group_id: int) -> tuple[int, ...]:
        return self._groups[group_id]

    def family_groups(self, family_id: int) -> tuple[int, ...]:
        return self._families[family_id]

    def family_of_group(self, group_id: int) -> int:
        return self._by_id[self._groups[group_id][0]].family_id

    def siblings(self, group_id: int) -> list[int]:
        fam = self.family_of_group(group_id)
        return [g for g in self._families[fam] if g != group_id]

    def group_attributes(self, group_id: int) -> dict[str, str]:
        return self._by_id[self._groups[group_id][0]].attributes

    def image_matrix(self, ids: Iterable[int]) -> np.ndarray:
        return np.array([self._by_id[i].image_vec for i in ids], dtype=np.float64)


def _validate_schema_capacity(schema: AttributeSchema, groups_per_family: int) -> None:
    # every non-prototype sibling needs a distinct (key, value) change
    capacity = sum(len(schema.values_per_key[k]) - 1 for k in schema.keys)
    if groups_per_family - 1 > capacity:
        raise ConfigError(
            f"groups_per_family={groups_per_family} exceeds schema capacity {capacity + 1}"
        )


def generate_universe(config: UniverseConfig, schema: AttributeSchema | None = None) -> ProductUniverse:
    config.validate()
    schema = schema or AttributeSchema.default()
    _validate_schema_capacity(schema, config.groups_per_family)
    rng = np.random.default_rng(config.seed)
    d = config.d_img
    n_keys = len(schema.keys)

    attr_emb = {
        attr_token(k, v): rng.normal(0.0, config.attribute_scale, d)
        for k in schema.keys
        for v in schema.values_per_key[k]
    }

    products: list[Product] = []
    pid = 0
    gid = 0
    fid = 0
    for cat in range(config.n_categories):
        cat_proto = rng.normal(0.0, config.category_scale, d)
        for _ in range(config.families_per_category):
            fam_dev = rng.normal(0.0, config.family_scale, d)
            proto = {k: schema.values_per_key[k][rng.integers(len(schema.values_per_key[k]))]
                     for k in schema.keys}
            key_order = [schema.keys[i] for i in rng.permutation(n_keys)]
            used: dict[str, set[str]] = {k: {proto[k]} for k in schema.keys}
            group_attrs = [dict(proto)]
            for g in range(1, config.groups_per_family):
                # walk keys until one still has an unused value
                for step in range(n_keys):
                    key = key_order[(g - 1 + step) % n_keys]
                    free = [v for v in schema.values_per_key[key] if v not in used[key]]
                    if free:
                        break
                val = free[rng.integers(len(free))]
                used[key].add(val)
                attrs = dict(proto)
                attrs[key] = val
                group_attrs.append(attrs)

            for attrs in group_attrs:
                tokens = schema.tokens_of(attrs)
                center = cat_proto + fam_dev + sum(attr_emb[t] for t in tokens)
                for _ in range(config.products_per_group):
                    img = center + rng.normal(0.0, config.image_noise_std, d)
                    keep = rng.random(len(tokens)) < config.title_attr_keep
                    title = [t for t, kp in zip(tokens, keep) if kp]
                    if config.text_noise_tokens:
                        idx = rng.choice(len(MARKETING_TOKENS), config.text_noise_tokens, replace=False)
                        title += [MARKETING_TOKENS[i] for i in idx]
                    order = rng.permutation(len(title))
                    products.append(Product(
                        id=pid, category=cat, group_id=gid, family_id=fid,
                        attributes=dict((k, attrs[k]) for k in schema.keys),
                        text_tokens=tuple(title[i] for i in order),
                        image_vec=tuple(float(x) for x in img),
                    ))
                    pid += 1
                gid += 1
            fid += 1
    return ProductUniverse(schema, tuple(products))


def attribute_diff(a: dict[str, str], b: dict[str, str]) -> list[str]:
    return [k for k in a if a[k] != b.get(k)]


def oracle_attributes(universe: ProductUniverse, product_id: int) -> list[str]:
    """Ground-truth attribute tokens, most sibling-discriminating keys first.

    A key's priority is the number of sibling groups whose value differs on it;
    ties and non-discriminating keys fall back to schema order.
    """
    product = universe.product(product_id)
    counts = {k: 0 for k in universe.schema.keys}
    for sib in universe.siblings(product.group_id):
        for k in attribute_diff(product.attributes, universe.group_attributes(sib)):
            counts[k] += 1
    rank = {k: i for i, k in enumerate(universe.schema.keys)}
    keys = sorted(universe.schema.keys, key=lambda k: (-counts[k], rank[k]))
    return [attr_token(k, product.attributes[k]) for k in keys]


def distinguishing_keys(universe: ProductUniverse, product_id: int) -> list[str]:
    product = universe.product(product_id)
    keys: set[str] = set()
    for sib in universe.siblings(product.group_id):
        keys.update(attribute_diff(product.attributes, universe.group_attributes(sib)))
    return [k for k in oracle_key_order(universe, product_id) if k in keys]


def oracle_key_order(universe: ProductUniverse, product_id: int) -> list[str]:
    return [t.split("=", 1)[0] for t in oracle_attributes(universe, product_id)]


def sample_pairs(
    universe: ProductUniverse,
    n_pairs: int,
    seed: int,
    group_ids: Iterable[int] | None = None,
    allowed_ids: Iterable[int] | None = None,
) -> list[TrainingPair]:
    """Sample query/positive pairs, cycling over shuffled groups so coverage is even."""
    if n_pairs < 0:
        raise ConfigError(f"n_pairs must be >= 0, got {n_pairs}")
    groups = list(universe.group_ids if group_ids is None else group_ids)
    if n_pairs == 0:
        return []
    if not groups:
        raise ConfigError("no groups to sample from")
    allowed = None if allowed_ids is None else set(allowed_ids)
    members_of = {
        g: [m for m in universe.group_members(g) if allowed is None or m in allowed] for g in groups
    }
    for g, members in members_of.items():
        if len(members) < 2:
            raise ConfigError(f"group {g} has fewer than 2 products; cannot form a pair")
    rng = np.random.default_rng(seed)
    pairs = []
    order: list[int] = []
    for i in range(n_pairs):
        if not order:
            order = [groups[j] for j in rng.permutation(len(groups))]
        g = order.pop()
        members = members_of[g]
        q, p = rng.choice(len(members), 2, replace=False)
        pairs.append(TrainingPair(members[q], members[p], INSTRUCTIONS[i % len(INSTRUCTIONS)]))
    return pairs


def save_universe(universe: ProductUniverse, path: str | Path) -> None:
    # json float repr is shortest round-trip, so 64-bit values survive exactly
    with open(path, "w") as f:
        for p in universe.products:
            f.write(json.dumps(p.to_json(), separators=(",", ":")) + "\n")


def load_universe(path: str | Path, schema: AttributeSchema | None = None) -> ProductUniverse:
    products = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                products.append(Product.from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise UniverseParseError(lineno, f"malformed product record ({exc})") from exc
    if not products:
        raise UniverseParseError(0, "empty universe file")
    if schema is None:
        keys = tuple(products[0].attributes)
        values: dict[str, list[str]] = {k: [] for k in keys}
        for p in products:
            for k in keys:
                if p.attributes[k] not in values[k]:
                    values[k].append(p.attributes[k])
        values = {k: sorted(v) + ["<unk>"] * (len(v) < 2) for k, v in values.items()}
        schema = AttributeSchema(keys, {k: tuple(v) for k, v in values.items()})
    return ProductUniverse(schema, tuple(products))


def save_pairs(pairs: list[TrainingPair], path: str | Path) -> None:
    with open(path, "w") as f:
        for p in pairs:
            f.write(json.dumps({"query_id": p.query_id, "positive_id": p.positive_id,
                                "instruction": p.instruction}) + "\n")


def load_pairs(path: str | Path) -> list[TrainingPair]:
    pairs = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                pairs.append(TrainingPair(int(obj["query_id"]), int(obj["positive_id"]),
                                          str(obj["instruction"])))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise UniverseParseError(lineno, f"malformed pair record ({exc})") from exc
    return pairs


def split_families(universe: ProductUniverse, fractions: tuple[float, float, float], seed: int):
    """Partition family ids into (train, val, test) lists; whole families stay together."""
    fams = universe.family_ids
    rng = np.random.default_rng(seed)
    order = [fams[i] for i in rng.permutation(len(fams))]
    n = len(order)
    n_val = max(1, int(round(fractions[1] * n)))
    n_test = max(1, int(round(fractions[2] * n)))
    if n_val + n_test >= n:
        raise ConfigError("not enough families for a train/val/test split")
    test = sorted(order[:n_test])
    val = sorted(order[n_test:n_test + n_val])
    train = sorted(order[n_test + n_val:])
    return train, val, test
