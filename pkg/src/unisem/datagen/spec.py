"""Domain specifications: schema, lexicon and utterance templates.

Templates pair a surface pattern with a program pattern over the same
slots. Slots:

=========  ==========================================  ===================
slot       surface                                     program
=========  ==========================================  ===================
type       (none)                                      entity type token
noun       singular noun                               (none)
plural     plural noun                                 (none)
nprop      phrase of a numeric property                property name
eprop      phrase of an entity-valued property         property name
sprop      phrase of a string property                 property name
num        a threshold of ``nprop``                    the number
ent        a value of ``eprop`` (an entity mention)    entity id
str        a value of ``sprop``                        the value
self       an entity of the domain type                entity id
cmp        lexicon phrase of an ordered comparator     comparator
sup        lexicon phrase of argmax / argmin           argmax / argmin
count      lexicon phrase for counting                 (none)
list       lexicon phrase for listing                  (none)
eq, neq    lexicon phrase for = / !=                   (none)
=========  ==========================================  ===================
"""

from __future__ import annotations

import itertools
import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..errors import ConfigError, GenerationError, MissingInputError

SLOTS = frozenset({"type", "noun", "plural", "nprop", "eprop", "sprop", "num", "ent", "str",
                   "self", "cmp", "sup", "count", "list", "eq", "neq"})
LEXICON_KEYS = ("argmax", "argmin", "<", "<=", ">", ">=", "=", "!=", "count", "list")

_SLOT = re.compile(r"\{(\w+)\}")


def slots_of(pattern: str) -> list[str]:
    return _SLOT.findall(pattern)


@dataclass
class PropertySpec:
    name: str
    kind: str
    phrases: list[str]
    values: list = field(default_factory=list)  # string / entity kinds
    low: int = 0  # number kind: values low, low+step, ..., high
    high: int = 0
    step: int = 1
    thresholds: list[int] = field(default_factory=list)
    value_type: str | None = None  # entity kind: id namespace, e.g. en.cuisine

    def value_id(self, value: str) -> str:
        return f"{self.value_type}.{value.replace(' ', '_')}"


@dataclass
class Template:
    name: str
    utterance: str
    program: str


@dataclass
class DomainSpec:
    domain_id: str
    entity_type: str
    noun: str
    plural: str
    properties: list[PropertySpec]
    entity_names: list[str]
    num_entities: int
    lexicon: dict[str, list[str]]
    templates: list[Template]

    def __post_init__(self):
        self.properties = [p if isinstance(p, PropertySpec) else PropertySpec(**p) for p in self.properties]
        self.templates = [t if isinstance(t, Template) else Template(**t) for t in self.templates]
        missing = [k for k in LEXICON_KEYS if not self.lexicon.get(k)]
        if missing:
            raise ConfigError(f"{self.domain_id}: lexicon lacks {missing}")
        if not 1 <= self.num_entities <= len(self.entity_names):
            raise ConfigError(f"{self.domain_id}: need {self.num_entities} entity names, have {len(self.entity_names)}")
        for t in self.templates:
            unknown = set(slots_of(t.utterance) + slots_of(t.program)) - SLOTS
            if unknown:
                raise GenerationError(f"template {t.name!r} uses unbound slots {sorted(unknown)}")

    def props(self, kind: str) -> list[PropertySpec]:
        return [p for p in self.properties if p.kind == kind]

    def entity_id(self, name: str) -> str:
        return f"{self.entity_type}.{name.replace(' ', '_')}"

    def supports(self, template: Template) -> bool:
        used = set(slots_of(template.utterance) + slots_of(template.program))
        needs = {"nprop": "number", "eprop": "entity", "sprop": "string"}
        return all(self.props(kind) for slot, kind in needs.items() if slot in used)

    def program_tokens(self) -> list[str]:
        """Domain-specific program tokens (type, properties, literal values)."""
        toks = [self.entity_type]
        toks += [p.name for p in self.properties]
        for p in self.properties:
            if p.kind == "string":
                toks += p.values
            elif p.kind == "number":
                toks += [str(t) for t in p.thresholds]
        return list(dict.fromkeys(toks))

    def to_json(self) -> dict:
        return asdict(self)


# Shared templates. Every domain instantiates these with its own lexicon.
DEFAULT_TEMPLATES = [
    Template("all", "{list} {plural}", "{type}"),
    Template("filter_entity", "{plural} whose {eprop} {eq} {ent}", "filter {type} {eprop} = {ent}"),
    Template("filter_not_entity", "{plural} whose {eprop} {neq} {ent}", "filter {type} {eprop} != {ent}"),
    Template("filter_string", "{plural} whose {sprop} {eq} {str}", "filter {type} {sprop} = {str}"),
    Template("filter_number", "{plural} with {nprop} {cmp} {num}", "filter {type} {nprop} {cmp} {num}"),
    Template("compare_entity", "{plural} whose {nprop} is {cmp} that of {self}",
             "filter {type} {nprop} {cmp} ( getProperty {self} {nprop} )"),
    Template("superlative", "{noun} with the {sup} {nprop}", "{sup} {type} {nprop}"),
    Template("superlative_filter", "{noun} whose {eprop} {eq} {ent} with the {sup} {nprop}",
             "{sup} filter {type} {eprop} = {ent} {nprop}"),
    Template("property_of_superlative", "{sprop} of the {noun} with the {sup} {nprop}",
             "getProperty {sup} {type} {nprop} {sprop}"),
    Template("count_entity", "{count} {plural} whose {eprop} {eq} {ent}", "count filter {type} {eprop} = {ent}"),
    Template("count_number", "{count} {plural} with {nprop} {cmp} {num}", "count filter {type} {nprop} {cmp} {num}"),
]


def _combos(first: list[str], second: list[str]) -> list[str]:
    return [f"{a} {b}" for a, b in itertools.product(first, second)]


def _recipes() -> DomainSpec:
    names = [
        "rice pudding", "quiche", "lasagna", "pad thai", "ratatouille", "paella", "risotto", "moussaka",
        "gazpacho", "tiramisu", "falafel", "goulash", "bouillabaisse", "enchiladas", "biryani", "pho",
        "carbonara", "tagine", "shakshuka", "baklava", "ceviche", "dumplings", "pierogi", "churros",
        "minestrone", "tabbouleh", "meatloaf", "pancakes", "brownies", "cheesecake", "curry", "frittata",
        "gnocchi", "hummus", "jambalaya", "kebab", "lentil soup", "nachos", "omelette", "pesto pasta",
    ]
    return DomainSpec(
        domain_id="recipes", entity_type="en.recipe", noun="recipe", plural="recipes",
        properties=[
            PropertySpec("posting_date", "number", ["posting date"], low=2000, high=2015, thresholds=[2004, 2008, 2012]),
            PropertySpec("cooking_time", "number", ["cooking time"], low=10, high=90, step=5, thresholds=[20, 40, 60]),
            PropertySpec("preparation_time", "number", ["preparation time", "prep time"], low=5, high=45, step=5,
                         thresholds=[10, 20, 30]),
            PropertySpec("cuisine", "entity", ["cuisine"], values=["italian", "french", "mexican", "thai", "indian", "greek"],
                         value_type="en.cuisine"),
            PropertySpec("meal", "string", ["meal", "meal type"], values=["breakfast", "lunch", "dinner", "dessert"]),
        ],
        entity_names=names, num_entities=30,
        lexicon={
            "argmax": ["most", "largest"], "argmin": ["least", "smallest"],
            "<": ["less than"], "<=": ["at most"], ">": ["more than"], ">=": ["at least"],
            "=": ["is"], "!=": ["is not"], "count": ["how many"], "list": ["show me all", "list all"],
        },
        templates=list(DEFAULT_TEMPLATES),
    )


def _publications() -> DomainSpec:
    names = _combos(["neural", "statistical", "deep", "sparse", "robust", "latent", "bayesian", "unsupervised"],
                    ["parsing", "alignment", "tagging", "translation", "embeddings"])
    return DomainSpec(
        domain_id="publications", entity_type="en.article", noun="article", plural="articles",
        properties=[
            PropertySpec("publication_date", "number", ["publication date", "publication year"], low=1990, high=2015,
                         thresholds=[1995, 2000, 2005, 2010]),
            PropertySpec("num_citations", "number", ["citations", "citation count"], low=0, high=200, step=10,
                         thresholds=[50, 100, 150]),
            PropertySpec("num_pages", "number", ["pages", "page count"], low=4, high=40, step=2, thresholds=[8, 12, 20]),
            PropertySpec("venue", "entity", ["venue"], values=["acl", "emnlp", "naacl", "coling", "icml", "neurips"],
                         value_type="en.venue"),
            PropertySpec("article_type", "string", ["article type", "publication type"],
                         values=["journal", "conference", "workshop"]),
        ],
        entity_names=names, num_entities=30,
        lexicon={
            "argmax": ["maximum number of", "highest"], "argmin": ["minimum number of", "lowest"],
            "<": ["fewer than", "below"], "<=": ["no more than"], ">": ["over"], ">=": ["no less than"],
            "=": ["is"], "!=": ["is not"], "count": ["number of", "total count of"], "list": ["find all", "list every"],
        },
        templates=list(DEFAULT_TEMPLATES),
    )


def _housing() -> DomainSpec:
    names = _combos(["maple", "cedar", "birch", "willow", "harbor", "summit", "oak", "pine"],
                    ["court", "terrace", "lofts", "gardens", "commons"])
    return DomainSpec(
        domain_id="housing", entity_type="en.housing_unit", noun="housing unit", plural="housing units",
        properties=[
            PropertySpec("rent", "number", ["rent", "monthly rent"], low=900, high=2900, step=100,
                         thresholds=[1200, 1800, 2400]),
            PropertySpec("size", "number", ["size", "square footage"], low=400, high=2000, step=100,
                         thresholds=[800, 1200, 1600]),
            PropertySpec("housing_posting_date", "number", ["listing date"], low=2005, high=2015,
                         thresholds=[2008, 2012]),
            PropertySpec("neighborhood", "entity", ["neighborhood", "area"],
                         values=["midtown", "chelsea", "soho", "harlem", "tribeca", "astoria"], value_type="en.neighborhood"),
            PropertySpec("housing_type", "string", ["housing type", "kind of housing"],
                         values=["apartment", "condo", "townhouse", "studio"]),
        ],
        entity_names=names, num_entities=30,
        lexicon={
            "argmax": ["highest", "greatest"], "argmin": ["lowest", "cheapest"],
            "<": ["under"], "<=": ["up to"], ">": ["above"], ">=": ["at least", "starting at"],
            "=": ["is in", "is"], "!=": ["is not"], "count": ["total number of", "how many"],
            "list": ["show", "what are the"],
        },
        templates=list(DEFAULT_TEMPLATES),
    )


def _restaurants() -> DomainSpec:
    names = _combos(["golden", "blue", "little", "royal", "lucky", "green", "silver"],
                    ["dragon", "olive", "garden", "spoon", "lantern"])
    return DomainSpec(
        domain_id="restaurants", entity_type="en.restaurant", noun="restaurant", plural="restaurants",
        properties=[
            PropertySpec("star_rating", "number", ["star rating", "stars"], low=1, high=5, thresholds=[2, 3, 4]),
            PropertySpec("price_rating", "number", ["price rating"], low=1, high=4, thresholds=[2, 3]),
            PropertySpec("num_reviews", "number", ["reviews", "review count"], low=10, high=500, step=10,
                         thresholds=[100, 250, 400]),
            PropertySpec("restaurant_cuisine", "entity", ["cuisine", "food"],
                         values=["sushi", "pizza", "tacos", "ramen", "barbecue"], value_type="en.food"),
            PropertySpec("meals", "string", ["serves", "meal served"], values=["brunch", "supper", "lunchtime"]),
        ],
        entity_names=names, num_entities=30,
        lexicon={
            "argmax": ["best", "top"], "argmin": ["worst", "fewest"],
            "<": ["below"], "<=": ["at most"], ">": ["over"], ">=": ["at least"],
            "=": ["is"], "!=": ["is not"], "count": ["how many"], "list": ["list all"],
        },
        templates=list(DEFAULT_TEMPLATES),
    )


def _blocks() -> DomainSpec:
    names = _combos(["block"], [str(i) for i in range(1, 41)])
    return DomainSpec(
        domain_id="blocks", entity_type="en.block", noun="block", plural="blocks",
        properties=[
            PropertySpec("length", "number", ["length"], low=1, high=10, thresholds=[3, 5, 7]),
            PropertySpec("width", "number", ["width"], low=1, high=10, thresholds=[3, 5, 7]),
            PropertySpec("height", "number", ["height"], low=1, high=10, thresholds=[3, 5, 7]),
            PropertySpec("color", "entity", ["color"], values=["red", "blue", "green", "yellow"], value_type="en.color"),
            PropertySpec("shape", "string", ["shape"], values=["cube", "pyramid", "cylinder"]),
        ],
        entity_names=names, num_entities=30,
        lexicon={
            "argmax": ["longest", "biggest"], "argmin": ["shortest", "smallest"],
            "<": ["smaller than"], "<=": ["at most"], ">": ["larger than"], ">=": ["at least"],
            "=": ["is"], "!=": ["is not"], "count": ["how many"], "list": ["show all"],
        },
        templates=list(DEFAULT_TEMPLATES),
    )


def _calendar() -> DomainSpec:
    names = _combos(["weekly", "annual", "quarterly", "team", "board", "project"],
                    ["standup", "review", "sync", "retreat", "planning"])
    return DomainSpec(
        domain_id="calendar", entity_type="en.meeting", noun="meeting", plural="meetings",
        properties=[
            PropertySpec("date", "number", ["date", "day"], low=1, high=28, thresholds=[7, 14, 21]),
            PropertySpec("start_time", "number", ["start time"], low=8, high=18, thresholds=[10, 13, 16]),
            PropertySpec("length_hours", "number", ["duration", "length"], low=1, high=4, thresholds=[2, 3]),
            PropertySpec("location", "entity", ["location", "room"],
                         values=["greenberg cafe", "central office", "north wing"], value_type="en.location"),
            PropertySpec("attendee_group", "string", ["attendees"], values=["engineering", "sales", "everyone"]),
        ],
        entity_names=names, num_entities=30,
        lexicon={
            "argmax": ["latest", "longest"], "argmin": ["earliest", "shortest"],
            "<": ["before"], "<=": ["no later than"], ">": ["after"], ">=": ["no earlier than"],
            "=": ["is"], "!=": ["is not"], "count": ["how many"], "list": ["list all"],
        },
        templates=list(DEFAULT_TEMPLATES),
    )


def _basketball() -> DomainSpec:
    names = _combos(["kobe", "lebron", "stephen", "kevin", "tim", "dirk", "magic"],
                    ["bryant", "james", "curry", "duncan", "nowitzki"])
    return DomainSpec(
        domain_id="basketball", entity_type="en.player", noun="player", plural="players",
        properties=[
            PropertySpec("points", "number", ["points"], low=0, high=40, step=2, thresholds=[10, 20, 30]),
            PropertySpec("assists", "number", ["assists"], low=0, high=15, thresholds=[5, 10]),
            PropertySpec("rebounds", "number", ["rebounds"], low=0, high=20, thresholds=[5, 10, 15]),
            PropertySpec("team", "entity", ["team"], values=["lakers", "celtics", "bulls", "spurs"], value_type="en.team"),
            PropertySpec("position", "string", ["position"], values=["guard", "forward", "center"]),
        ],
        entity_names=names, num_entities=30,
        lexicon={
            "argmax": ["most", "top"], "argmin": ["fewest", "least"],
            "<": ["fewer than"], "<=": ["at most"], ">": ["more than"], ">=": ["at least"],
            "=": ["is"], "!=": ["is not"], "count": ["how many"], "list": ["list all"],
        },
        templates=list(DEFAULT_TEMPLATES),
    )


_BUILDERS = {
    "recipes": _recipes, "publications": _publications, "housing": _housing,
    "restaurants": _restaurants, "blocks": _blocks, "calendar": _calendar, "basketball": _basketball,
}
DEFAULT_DOMAINS = ("recipes", "publications", "housing")


def bundled_spec(domain_id: str) -> DomainSpec:
    try:
        return _BUILDERS[domain_id]()
    except KeyError:
        raise ConfigError(f"no bundled domain {domain_id!r}; choose from {sorted(_BUILDERS)}") from None


def default_bundle(domains=DEFAULT_DOMAINS) -> list[DomainSpec]:
    return [bundled_spec(d) for d in domains]


def save_bundle(specs: list[DomainSpec], path) -> None:
    Path(path).write_text(json.dumps({"domains": [s.to_json() for s in specs]}, indent=1))


def load_bundle(path_or_name) -> list[DomainSpec]:
    """Load a bundle file, or name bundled domains: ``default``, ``all``, or ``a,b``."""
    name = str(path_or_name)
    if name == "default":
        return default_bundle()
    if name == "all":
        return [bundled_spec(d) for d in _BUILDERS]
    path = Path(name)
    if not path.exists():
        if all(part in _BUILDERS for part in name.split(",")):
            return [bundled_spec(d) for d in name.split(",")]
        raise MissingInputError(f"spec bundle {name} not found")
    try:
        doc = json.loads(path.read_text())
        return [DomainSpec(**d) for d in doc["domains"]]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ConfigError(f"bad spec bundle {path}: {exc}") from exc
