import re
from typing import Any, ClassVar, Dict, Optional, Tuple

from jinja2 import Environment, FileSystemLoader, StrictUndefined, Template
from jinja2.exceptions import TemplateNotFound
from pydantic import BaseModel, ConfigDict, ValidationError

from pairwise_mlm.config import __version__, get_config
from pairwise_mlm.exceptions import (ConfigKeyError, ConfigValidationError,
                                     PairwiseMlmTypeError,
                                     RenderableTemplateError)
from pairwise_mlm.utils import canonical_hash

GLOBAL_CONFIGS = get_config()


class PairwiseMlmBaseModel(BaseModel):
    """A pydantic BaseModel class that provides the basic
    functionality for all pairwise-mlm configuration and record classes.

    Instances are frozen, so they are hashable and can be kept in a
    RecordSortedSet. Unknown fields are rejected instead of silently ignored.

    Child classes that are stored in a RecordStore MUST override `_key` with
    the names of the fields that uniquely identify a record. That tuple is
    also used as the sort key in the store.
    """

    model_config = ConfigDict(
        extra="forbid",
        frozen=True,
        populate_by_name=True,
        arbitrary_types_allowed=True,
    )

    _key: ClassVar[Tuple[str, ...]] = ()

    @property
    def key(self) -> Tuple:
        """Values of the fields named in `_key`."""
        return tuple(getattr(self, attr) for attr in self._key)

    def __lt__(self, other):
        return self.key < other.key

    @classmethod
    def valid_keys(cls) -> Tuple[str, ...]:
        """Field names (and aliases) accepted by `create`."""
        names = []
        for name, field in cls.model_fields.items():
            names.append(field.alias or name)
        return tuple(names)

    @classmethod
    def create(cls, dict_args: Optional[Dict[str, Any]] = None, **kwargs) -> "PairwiseMlmBaseModel":
        """
        Factory class method used to instantiate a model with data
        passed as a dictionary, typically loaded from a config file.

        Args:
            dict_args (Dict[str, Any]): a dictionary containing the data to be used
            to instantiate the model.

        Raises:
            PairwiseMlmTypeError: If `dict_args` is not a dict.
            ConfigKeyError: If `dict_args` holds a key the model doesn't define.
            ConfigValidationError: If any value fails validation.

        Returns:
            PairwiseMlmBaseModel: the instance of the model created.
        """
        if dict_args is not None and not isinstance(dict_args, dict):
            raise PairwiseMlmTypeError(
                f"Data passed to {cls.__name__} must be of type 'dict', but was {type(dict_args)}"
            )

        dict_args = dict(dict_args or {})
        dict_args.update(kwargs)

        accepted = set(cls.valid_keys()) | set(cls.model_fields)
        for key in dict_args:
            if key not in accepted:
                raise ConfigKeyError(f"{cls.__name__}.{key}", cls.valid_keys())

        try:
            return cls.model_validate(dict_args)
        except ValidationError as err:
            raise ConfigValidationError(f"{cls.__name__}: {err}") from err

    def updated(self, **changes: Any) -> "PairwiseMlmBaseModel":
        """Returns a validated copy with `changes` applied."""
        data = self.model_dump(by_alias=True)
        for name, value in changes.items():
            field = type(self).model_fields.get(name)
            data[field.alias if field is not None and field.alias else name] = value
        return type(self).create(data)

    @property
    def config_hash(self) -> str:
        """
        Short sha256 over the canonical JSON form of the model. Two configs
        that validate to the same values share a hash.
        """
        return canonical_hash(self.model_dump(mode="json", by_alias=True))


class PairwiseMlmRenderableModel(PairwiseMlmBaseModel):
    """A Renderable model allows for its instances to render a string
    according to a Jinja2 template. Reports use it for their plain-text
    summary tables.

    The expected template file name is derived in either of two ways:
        - a statically defined `_template_name` attribute in the child class.
        - the class name split on the capital letters, removing
        the word 'Model' (if present), and then joined by underscores ('_'):
            - PretrainSummary -> pretrain_summary
            - CompareReportModel -> compare_report
    """

    _template_name: ClassVar[Optional[str]] = None

    @property
    def template_name(self) -> str:
        if self._template_name:
            return self._template_name

        split_cls_name = re.findall("[A-Z][^A-Z]*", type(self).__name__)

        if "Model" in split_cls_name:
            split_cls_name.remove("Model")

        return "_".join(split_cls_name).lower()

    def get_rendered_str(self, extra_vars_dict: Optional[Dict[str, Any]] = None) -> str:
        """
        Renders this model into a string according to the Jinja2 template
        indicated by `template_name`. Templates can always use `version`,
        the package version.

        Args:
            extra_vars_dict (Optional[Dict[str, Any]], optional): A dictionary containing
            extra vars that the template may require. Defaults to None.

        Returns:
            str: the rendered string produced by the .render() method of the Template
            object.
        """
        _dict_to_render = {"version": __version__, **dict(self)}
        if extra_vars_dict:
            _dict_to_render.update(extra_vars_dict)

        return self._get_template().render(_dict_to_render)

    def _get_template(self) -> Template:
        """
        Retrieves the template file to be used to render this model. Only
        Jinja2 templates with a '.j2' extension are supported.

        Raises:
            RenderableTemplateError: if a template file with expected name does not exist.
        """
        env = Environment(
            loader=FileSystemLoader(GLOBAL_CONFIGS.templates_dir),
            undefined=StrictUndefined,
            keep_trailing_newline=True,
        )
        try:
            return env.get_template(f"{self.template_name}.j2")
        except TemplateNotFound as err:
            raise RenderableTemplateError(err.message)
