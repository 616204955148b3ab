"""Dataset steering model: XML parsing, serialization, and validation.

A steering document describes one dataset: its metadata, global steering
parameters, software environments (metaprojects), trays of module
instances, and an optional task graph. Expression text in parameter
values is carried verbatim; nothing here evaluates it.
"""

from __future__ import annotations

import re
import xml.etree.ElementTree as ET
import xml.parsers.expat
from dataclasses import dataclass, field
from xml.sax.saxutils import escape, quoteattr

IDENTIFIER_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_.]*\Z")
PARAM_TYPES = ("string", "int", "float", "bool", "liststring")

SCHEMA_VERSION = "3"


class MalformedXml(Exception):
    """Input is not well-formed XML."""

    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


class SchemaViolation(Exception):
    """Well-formed XML that does not follow the steering schema."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else "%s (line %d)" % (message, line))
        self.line = line


@dataclass
class DatasetMeta:
    description: str = ""
    category: str = ""
    job_count: int = 0
    alias: str | None = None


@dataclass
class SteeringParam:
    name: str
    value: str


@dataclass
class Metaproject:
    name: str
    version: str | None = None


@dataclass
class ModuleParam:
    name: str
    type: str = "string"
    value: str | list[str] = ""


@dataclass
class ModuleInstance:
    name: str
    class_name: str
    parameters: list[ModuleParam] = field(default_factory=list)
    metaproject: str | None = None


@dataclass
class Tray:
    name: str
    modules: list[ModuleInstance] = field(default_factory=list)
    metaproject_refs: list[str] = field(default_factory=list)
    iterations: int = 1


@dataclass
class ResourceRequirements:
    needs_gpu: bool = False
    min_memory_mb: int = 0
    min_disk_mb: int = 0
    max_walltime_s: int = 3600


@dataclass
class TaskDef:
    name: str
    tray_refs: list[str] = field(default_factory=list)
    requirements: ResourceRequirements = field(default_factory=ResourceRequirements)


@dataclass
class SteeringSpec:
    dataset_meta: DatasetMeta = field(default_factory=DatasetMeta)
    parameters: list[SteeringParam] = field(default_factory=list)
    metaprojects: list[Metaproject] = field(default_factory=list)
    trays: list[Tray] = field(default_factory=list)
    task_defs: list[TaskDef] = field(default_factory=list)
    task_edges: list[tuple[str, str]] = field(default_factory=list)

    def tray(self, name):
        for t in self.trays:
            if t.name == name:
                return t
        raise KeyError(name)

    def steering_map(self):
        return {p.name: p.value for p in self.parameters}


@dataclass
class Violation:
    code: str
    path: str
    message: str

    def __str__(self):
        return "%s at %s: %s" % (self.code, self.path, self.message)


# ---------------------------------------------------------------------------
# parsing

_ALLOWED_ATTRS = {
    "configuration": {"version"},
    "meta": set(),
    "description": set(),
    "category": set(),
    "jobcount": set(),
    "alias": set(),
    "steering": set(),
    "parameter": {"name", "type"},
    "item": set(),
    "metaproject": {"name", "version"},
    "tray": {"name", "metaprojects", "iterations"},
    "module": {"name", "class", "metaproject"},
    "task": {"name", "trays", "gpu", "memory", "disk", "walltime"},
    "taskrel": {"parent", "child"},
}

_CONTAINERS = {"configuration", "meta", "steering", "tray", "module", "task"}


def _start_tag_lines(xml_text):
    """Line number of every start tag, in document order."""
    lines = []
    parser = xml.parsers.expat.ParserCreate()
    parser.StartElementHandler = lambda name, attrs: lines.append(parser.CurrentLineNumber)
    try:
        parser.Parse(xml_text, True)
    except xml.parsers.expat.ExpatError as exc:
        raise MalformedXml(str(exc), line=getattr(exc, "lineno", None))
    return lines


def parse_steering(xml_text: str) -> SteeringSpec:
    """Parse a steering document. Expression text is preserved verbatim."""
    lines = _start_tag_lines(xml_text)
    try:
        root = ET.fromstring(xml_text)
    except ET.ParseError as exc:
        raise MalformedXml(str(exc), line=exc.position[0] if exc.position else None)

    line_of = {}
    for elem, line in zip(root.iter(), lines):
        line_of[id(elem)] = line

    def fail(elem, message):
        raise SchemaViolation(message, line=line_of.get(id(elem)))

    def check_elem(elem, expected_children):
        if elem.tag not in _ALLOWED_ATTRS:
            fail(elem, "unknown element <%s>" % elem.tag)
        extra = set(elem.attrib) - _ALLOWED_ATTRS[elem.tag]
        if extra:
            fail(elem, "unknown attribute %r on <%s>" % (sorted(extra)[0], elem.tag))
        for child in elem:
            if child.tag not in expected_children:
                fail(child, "unexpected element <%s> inside <%s>" % (child.tag, elem.tag))
        if elem.tag in _CONTAINERS and elem.text and elem.text.strip():
            fail(elem, "unexpected text inside <%s>" % elem.tag)

    def require(elem, attr):
        if attr not in elem.attrib:
            fail(elem, "<%s> requires attribute %r" % (elem.tag, attr))
        return elem.attrib[attr]

    def text_of(elem):
        if len(elem):
            fail(elem, "<%s> must not contain elements" % elem.tag)
        return elem.text or ""

    def int_of(elem, text, what):
        try:
            return int(text)
        except ValueError:
            fail(elem, "%s must be an integer, got %r" % (what, text))

    def bool_attr(elem, attr, default):
        raw = elem.attrib.get(attr)
        if raw is None:
            return default
        if raw not in ("true", "false"):
            fail(elem, "attribute %r must be 'true' or 'false'" % attr)
        return raw == "true"

    if root.tag != "configuration":
        fail(root, "root element must be <configuration>, got <%s>" % root.tag)
    version = require(root, "version")
    if version != SCHEMA_VERSION:
        fail(root, "unsupported configuration version %r" % version)
    check_elem(root, {"meta", "steering", "metaproject", "tray", "task", "taskrel"})

    spec = SteeringSpec()
    seen_meta = False
    seen_steering = False

    def parse_parameter(elem, owner_names):
        name = require(elem, "name")
        ptype = elem.attrib.get("type", "string")
        if ptype not in PARAM_TYPES:
            fail(elem, "unknown parameter type %r" % ptype)
        if name in owner_names:
            fail(elem, "duplicate parameter name %r" % name)
        owner_names.add(name)
        if ptype == "liststring":
            check_elem(elem, {"item"})
            if elem.text and elem.text.strip():
                fail(elem, "liststring parameter carries <item> children, not text")
            value = [text_of(item) for item in elem]
            for item in elem:
                check_elem(item, set())
        else:
            value = text_of(elem)
        return ModuleParam(name=name, type=ptype, value=value)

    for elem in root:
        tag = elem.tag
        if tag == "meta":
            if seen_meta:
                fail(elem, "duplicate <meta>")
            seen_meta = True
            check_elem(elem, {"description", "category", "jobcount", "alias"})
            seen = set()
            for child in elem:
                if child.tag in seen:
                    fail(child, "duplicate <%s>" % child.tag)
                seen.add(child.tag)
                check_elem(child, set())
            get = lambda t: elem.find(t)
            jc_elem = get("jobcount")
            if jc_elem is None:
                fail(elem, "<meta> requires <jobcount>")
            job_count = int_of(jc_elem, text_of(jc_elem), "jobcount")
            alias_elem = get("alias")
            spec.dataset_meta = DatasetMeta(
                description=text_of(get("description")) if get("description") is not None else "",
                category=text_of(get("category")) if get("category") is not None else "",
                job_count=job_count,
                alias=text_of(alias_elem) if alias_elem is not None else None,
            )
        elif tag == "steering":
            if seen_steering:
                fail(elem, "duplicate <steering>")
            seen_steering = True
            check_elem(elem, {"parameter"})
            names = set()
            for child in elem:
                p = parse_parameter(child, names)
                if p.type != "string":
                    fail(child, "steering parameters are untyped text; drop type=%r" % p.type)
                spec.parameters.append(SteeringParam(name=p.name, value=p.value))
        elif tag == "metaproject":
            check_elem(elem, set())
            name = require(elem, "name")
            if any(m.name == name for m in spec.metaprojects):
                fail(elem, "duplicate metaproject %r" % name)
            spec.metaprojects.append(Metaproject(name=name, version=elem.attrib.get("version")))
        elif tag == "tray":
            check_elem(elem, {"module"})
            name = require(elem, "name")
            if any(t.name == name for t in spec.trays):
                fail(elem, "duplicate tray name %r" % name)
            refs_raw = elem.attrib.get("metaprojects", "")
            refs = [r for r in (s.strip() for s in refs_raw.split(",")) if r]
            iterations = 1
            if "iterations" in elem.attrib:
                iterations = int_of(elem, elem.attrib["iterations"], "iterations")
            tray = Tray(name=name, metaproject_refs=refs, iterations=iterations)
            for mod_elem in elem:
                check_elem(mod_elem, {"parameter"})
                mod_name = require(mod_elem, "name")
                if any(m.name == mod_name for m in tray.modules):
                    fail(mod_elem, "duplicate module name %r in tray %r" % (mod_name, name))
                inst = ModuleInstance(
                    name=mod_name,
                    class_name=require(mod_elem, "class"),
                    metaproject=mod_elem.attrib.get("metaproject"),
                )
                pnames = set()
                for p_elem in mod_elem:
                    inst.parameters.append(parse_parameter(p_elem, pnames))
                tray.modules.append(inst)
            spec.trays.append(tray)
        elif tag == "task":
            check_elem(elem, set())
            name = require(elem, "name")
            if any(t.name == name for t in spec.task_defs):
                fail(elem, "duplicate task name %r" % name)
            trays_raw = require(elem, "trays")
            refs = [r for r in (s.strip() for s in trays_raw.split(",")) if r]
            reqs = ResourceRequirements(
                needs_gpu=bool_attr(elem, "gpu", False),
                min_memory_mb=int_of(elem, elem.attrib.get("memory", "0"), "memory"),
                min_disk_mb=int_of(elem, elem.attrib.get("disk", "0"), "disk"),
                max_walltime_s=int_of(elem, elem.attrib.get("walltime", "3600"), "walltime"),
            )
            spec.task_defs.append(TaskDef(name=name, tray_refs=refs, requirements=reqs))
        elif tag == "taskrel":
            check_elem(elem, set())
            parent = require(elem, "parent")
            child = require(elem, "child")
            if (parent, child) in spec.task_edges:
                fail(elem, "duplicate taskrel %s -> %s" % (parent, child))
            spec.task_edges.append((parent, child))

    if not seen_meta:
        fail(root, "<configuration> requires a <meta> section")
    return spec


# ---------------------------------------------------------------------------
# serialization

def _leaf(out, indent, tag, text, attrs=""):
    out.append("%s<%s%s>%s</%s>" % (indent, tag, attrs, escape(text), tag))


def _param_xml(out, indent, p, typed=True):
    attrs = " name=%s" % quoteattr(p.name)
    ptype = getattr(p, "type", "string")
    if typed and ptype != "string":
        attrs += " type=%s" % quoteattr(ptype)
    if ptype == "liststring":
        out.append("%s<parameter%s>" % (indent, attrs))
        for item in p.value:
            _leaf(out, indent + "  ", "item", item)
        out.append("%s</parameter>" % indent)
    else:
        _leaf(out, indent, "parameter", p.value, attrs)


def serialize_steering(spec: SteeringSpec) -> str:
    """Render a spec back to XML; parse_steering round-trips it exactly."""
    out = ['<?xml version="1.0" encoding="UTF-8"?>']
    out.append('<configuration version="%s">' % SCHEMA_VERSION)
    meta = spec.dataset_meta
    out.append("  <meta>")
    _leaf(out, "    ", "description", meta.description)
    _leaf(out, "    ", "category", meta.category)
    _leaf(out, "    ", "jobcount", str(meta.job_count))
    if meta.alias is not None:
        _leaf(out, "    ", "alias", meta.alias)
    out.append("  </meta>")
    out.append("  <steering>")
    for p in spec.parameters:
        _param_xml(out, "    ", p, typed=False)
    out.append("  </steering>")
    for mp in spec.metaprojects:
        attrs = " name=%s" % quoteattr(mp.name)
        if mp.version is not None:
            attrs += " version=%s" % quoteattr(mp.version)
        out.append("  <metaproject%s/>" % attrs)
    for tray in spec.trays:
        attrs = " name=%s" % quoteattr(tray.name)
        if tray.metaproject_refs:
            attrs += " metaprojects=%s" % quoteattr(",".join(tray.metaproject_refs))
        if tray.iterations != 1:
            attrs += " iterations=%s" % quoteattr(str(tray.iterations))
        out.append("  <tray%s>" % attrs)
        for mod in tray.modules:
            mattrs = " name=%s class=%s" % (quoteattr(mod.name), quoteattr(mod.class_name))
            if mod.metaproject is not None:
                mattrs += " metaproject=%s" % quoteattr(mod.metaproject)
            if mod.parameters:
                out.append("    <module%s>" % mattrs)
                for p in mod.parameters:
                    _param_xml(out, "      ", p)
                out.append("    </module>")
            else:
                out.append("    <module%s/>" % mattrs)
        out.append("  </tray>")
    for task in spec.task_defs:
        attrs = " name=%s trays=%s" % (
            quoteattr(task.name),
            quoteattr(",".join(task.tray_refs)),
        )
        r = task.requirements
        if r.needs_gpu:
            attrs += ' gpu="true"'
        if r.min_memory_mb:
            attrs += " memory=%s" % quoteattr(str(r.min_memory_mb))
        if r.min_disk_mb:
            attrs += " disk=%s" % quoteattr(str(r.min_disk_mb))
        if r.max_walltime_s != 3600:
            attrs += " walltime=%s" % quoteattr(str(r.max_walltime_s))
        out.append("  <task%s/>" % attrs)
    for parent, child in spec.task_edges:
        out.append("  <taskrel parent=%s child=%s/>" % (quoteattr(parent), quoteattr(child)))
    out.append("</configuration>")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# validation

def validate_steering(spec: SteeringSpec) -> list[Violation]:
    """Structural invariant check. Returns violations; never raises."""
    v = []

    def bad(code, path, message):
        v.append(Violation(code, path, message))

    def check_ident(name, path):
        if not isinstance(name, str) or not IDENTIFIER_RE.match(name):
            bad("bad-identifier", path, "%r is not a valid identifier" % (name,))

    meta = spec.dataset_meta
    if not isinstance(meta.job_count, int) or meta.job_count < 0:
        bad("bad-count", "meta/jobcount", "job_count must be a nonnegative integer")
    if meta.alias is not None and meta.alias == "":
        bad("empty-alias", "meta/alias", "alias, when present, must be nonempty")

    seen = set()
    for p in spec.parameters:
        path = "steering/parameter[%s]" % p.name
        check_ident(p.name, path)
        if p.name in seen:
            bad("duplicate-name", path, "duplicate steering parameter")
        seen.add(p.name)

    mp_names = set()
    for mp in spec.metaprojects:
        path = "metaproject[%s]" % mp.name
        check_ident(mp.name, path)
        if mp.name in mp_names:
            bad("duplicate-name", path, "duplicate metaproject")
        mp_names.add(mp.name)

    tray_names = set()
    for tray in spec.trays:
        tpath = "tray[%s]" % tray.name
        check_ident(tray.name, tpath)
        if tray.name in tray_names:
            bad("duplicate-name", tpath, "duplicate tray name")
        tray_names.add(tray.name)
        if not isinstance(tray.iterations, int) or tray.iterations < 1:
            bad("bad-count", tpath, "iterations must be a positive integer")
        if not tray.modules:
            bad("empty-tray", tpath, "tray has no modules")
        for ref in tray.metaproject_refs:
            if ref not in mp_names:
                bad("dangling-metaproject-ref", tpath, "undeclared metaproject %r" % ref)
        mod_names = set()
        for mod in tray.modules:
            mpath = "%s/module[%s]" % (tpath, mod.name)
            check_ident(mod.name, mpath)
            if mod.name in mod_names:
                bad("duplicate-name", mpath, "duplicate module name in tray")
            mod_names.add(mod.name)
            if mod.metaproject is not None and mod.metaproject not in tray.metaproject_refs:
                bad(
                    "dangling-metaproject-ref",
                    mpath,
                    "metaproject %r is not visible in this tray" % mod.metaproject,
                )
            pnames = set()
            for p in mod.parameters:
                ppath = "%s/parameter[%s]" % (mpath, p.name)
                if p.name in pnames:
                    bad("duplicate-name", ppath, "duplicate parameter name")
                pnames.add(p.name)
                if p.type not in PARAM_TYPES:
                    bad("bad-type", ppath, "unknown parameter type %r" % p.type)

    task_names = set()
    for task in spec.task_defs:
        tpath = "task[%s]" % task.name
        check_ident(task.name, tpath)
        if task.name in task_names:
            bad("duplicate-name", tpath, "duplicate task name")
        task_names.add(task.name)
        if not task.tray_refs:
            bad("empty-task", tpath, "task references no trays")
        for ref in task.tray_refs:
            if ref not in tray_names:
                bad("dangling-tray-ref", tpath, "undeclared tray %r" % ref)
        r = task.requirements
        if r.min_memory_mb < 0 or r.min_disk_mb < 0:
            bad("bad-requirements", tpath, "resource requirements must be nonnegative")
        if r.max_walltime_s < 1:
            bad("bad-requirements", tpath, "walltime must be positive")

    for parent, child in spec.task_edges:
        path = "taskrel[%s->%s]" % (parent, child)
        for end in (parent, child):
            if end not in task_names:
                bad("dangling-task-ref", path, "undeclared task %r" % end)

    # cycle check over well-formed edges (Kahn)
    edges = [(p, c) for p, c in spec.task_edges if p in task_names and c in task_names]
    indeg = {name: 0 for name in task_names}
    children = {name: [] for name in task_names}
    for p, c in edges:
        indeg[c] += 1
        children[p].append(c)
    ready = [n for n, d in indeg.items() if d == 0]
    visited = 0
    while ready:
        n = ready.pop()
        visited += 1
        for c in children[n]:
            indeg[c] -= 1
            if indeg[c] == 0:
                ready.append(c)
    if visited != len(task_names):
        stuck = sorted(n for n, d in indeg.items() if d > 0)
        bad("cycle", "taskrel", "task graph contains a cycle through %s" % ", ".join(stuck))

    return v
