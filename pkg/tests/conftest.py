import pytest

from censusflow.domain import PageTranscript, PersonRecord

# Four-row golden page: two households of two members each, heads first.
GOLDEN_LABEL = (
    "<s-h>Gendre <f>Pierre <o>cultivateur <l>chef <e>patron <a>75 <n>française\n"
    "<s>Paraud <f>Marie <o>néant <l>épouse <e>néant <a>66 <n>idem\n"
    "<s-h>Martin <f>Pierre <o>métayer <l>chef <e>patron <a>69 <n>idem\n"
    "<s>Joyoz <f>Suzanne <o>néant <l>mère <e>néant <a>72 <n>idem"
)


def golden_page() -> PageTranscript:
    return PageTranscript(
        (
            PersonRecord.from_names(
                surname_head="Gendre", firstname="Pierre", occupation="cultivateur",
                link="chef", employer="patron", age="75", nationality="française",
            ),
            PersonRecord.from_names(
                surname="Paraud", firstname="Marie", occupation="néant",
                link="épouse", employer="néant", age="66", nationality="idem",
            ),
            PersonRecord.from_names(
                surname_head="Martin", firstname="Pierre", occupation="métayer",
                link="chef", employer="patron", age="69", nationality="idem",
            ),
            PersonRecord.from_names(
                surname="Joyoz", firstname="Suzanne", occupation="néant",
                link="mère", employer="néant", age="72", nationality="idem",
            ),
        ),
        page_id="golden",
        page_index_in_register=0,
    )


@pytest.fixture
def golden():
    return golden_page()
