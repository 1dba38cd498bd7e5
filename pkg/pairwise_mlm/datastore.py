import inspect
from collections import defaultdict
from typing import (TYPE_CHECKING, Any, DefaultDict, Dict, List, Optional,
                    Type, Union)

from pairwise_mlm.custom_collections import RecordSortedSet
from pairwise_mlm.exceptions import (MultipleRecordsReturnedError,
                                     RecordDoesNotExistError,
                                     RecordStoreDirectAssignmentError)

if TYPE_CHECKING:
    from pairwise_mlm.models import PairwiseMlmBaseModel


class RecordStore:
    """
    Per-run record collection: one RecordSortedSet per record class name,
    each ordered by the records' `_key`, e.g.

        {"TrainStepRecord": RecordSortedSet([...]), "ValidationRecord": RecordSortedSet([...])}

    The first record saved under a key wins; later ones are dropped, or
    rejected with ValueError when `err_on_duplicate` is set.
    """

    def __init__(self, err_on_duplicate: bool = False):
        self._records: DefaultDict[str, RecordSortedSet] = defaultdict(RecordSortedSet)
        self.err_on_duplicate = err_on_duplicate

    @property
    def records(self) -> DefaultDict[str, RecordSortedSet]:
        return self._records

    @records.setter
    def records(self, _):
        raise RecordStoreDirectAssignmentError(
            "Cannot directly assign to attribute 'records' of a RecordStore object."
        )

    def as_dict(self) -> Dict[str, List[Dict[str, Any]]]:
        """Plain-dict copy of the records, fields dumped by alias."""
        return {
            key: [record.model_dump(mode="json", by_alias=True) for record in value]
            for key, value in self.records.items()
        }

    def save(self, obj: "PairwiseMlmBaseModel") -> None:
        """
        Saves a record to the store.

        Raises:
            ValueError: if a record with the same key is already stored
            and `err_on_duplicate` is True.
        """
        cls_name = self._get_cls_name(obj)

        if obj.key in {r.key for r in self.records[cls_name]}:
            if not self.err_on_duplicate:
                return
            raise ValueError(
                f"{cls_name}: duplicates not allowed. A record with fields {obj._key} "
                f"associated with values {obj.key} already exists."
            )

        self.records[cls_name].add(obj)

    @staticmethod
    def _get_cls_name(obj: Union[Type["PairwiseMlmBaseModel"], "PairwiseMlmBaseModel"]) -> str:
        return (obj if inspect.isclass(obj) else type(obj)).__name__

    def _search(
        self,
        record_class: Type["PairwiseMlmBaseModel"],
        search_params: Optional[Dict[Any, Any]] = None,
    ) -> RecordSortedSet:
        """
        Searches the records of a given class based on the search_params.

        Args:
            record_class: the class of the records to be searched.
            search_params: a dictionary with keys being record attributes and
            values the values to be searched for. If `None`, the entire
            RecordSortedSet associated with `record_class` is returned.
        """
        cls_name = self._get_cls_name(record_class)

        if search_params:
            return RecordSortedSet(
                [
                    x
                    for x in self.records[cls_name]
                    if all(getattr(x, k) == v for k, v in search_params.items())
                ]
            )

        return self.records[cls_name]

    def filter(
        self,
        record_class: Type["PairwiseMlmBaseModel"],
        search_params: Dict[Any, Any],
    ) -> RecordSortedSet:
        return self._search(record_class, search_params)

    def get(
        self,
        record_class: Type["PairwiseMlmBaseModel"],
        search_params: Dict[Any, Any],
    ) -> "PairwiseMlmBaseModel":
        """
        Returns the single record of `record_class` matching `search_params`.

        Raises:
            RecordDoesNotExistError: if nothing matches.
            MultipleRecordsReturnedError: if more than one record matches.
        """
        search = self.filter(record_class, search_params)

        if not search:
            raise RecordDoesNotExistError(
                f"A {record_class.__name__} record was not found matching params: {search_params}"
            )

        if len(search) > 1:
            raise MultipleRecordsReturnedError("More than one element found")

        return search[0]

    def get_all_by_class(self, record_class: Type["PairwiseMlmBaseModel"]) -> RecordSortedSet:
        return self._search(record_class)
