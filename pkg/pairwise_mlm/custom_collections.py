from numbers import Integral
from typing import Iterable, Optional

from sortedcontainers import SortedSet


class MaskPositions(SortedSet):
    """
    The set M of masked positions of one sequence.

    A SortedSet of non-negative ints, so iteration is always ascending and
    duplicates collapse. Pair labels are built by iterating it, which is what
    makes their order lexicographic.

    Raises:
        TypeError: If an element is not an int.
        ValueError: If an element is negative.
    """

    def __init__(self, iterable: Optional[Iterable[int]] = None):
        items = []
        for item in iterable if iterable is not None else []:
            if isinstance(item, bool) or not isinstance(item, Integral):
                raise TypeError(f"mask positions must be ints, got {type(item).__name__}")
            if item < 0:
                raise ValueError(f"mask positions must be non-negative, got {item}")
            items.append(int(item))
        super().__init__(items)


class RecordSortedSet(SortedSet):
    """
    This class implements a custom SortedSet with the 'key' argument
    set to a function that returns a record object's `key` property.

    NOTE: the `key` property returns a tuple containing the values associated
    with attribute names found in the private `_key` field of a record. For
    more details, look at pairwise_mlm.models.PairwiseMlmBaseModel and
    sortedcontainers.SortedSet.
    """

    def __init__(self, *args, **kwargs):
        super().__init__(key=lambda record: record.key, *args, **kwargs)
