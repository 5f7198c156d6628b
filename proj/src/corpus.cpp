#include "trojanlab/corpus.hpp"

namespace trojanlab {

const std::vector<std::string>& clean_corpus() {
  static const std::vector<std::string> sentences = {
      "the cat sat on the mat.",
      "the dog ran to the park.",
      "a bird sang in the tree.",
      "the sun rose over the hill.",
      "rain fell on the old roof.",
      "the river runs to the sea.",
      "a fox hid in the tall grass.",
      "the moon hung low and pale.",
      "snow covered the quiet town.",
      "the wind blew through the pines.",
      "a child drew maps in the sand.",
      "the train left at nine sharp.",
      "the baker made bread at dawn.",
      "a clock ticked in the hall.",
      "the boat drifted past the dock.",
      "leaves fell on the cold path.",
      "the owl watched from the barn.",
      "a lamp glowed in the window.",
      "the road bent around the lake.",
      "frost traced the glass at night.",
      "the horse grazed near the fence.",
      "a kettle hissed on the stove.",
      "the tide pulled at the shore.",
      "bees hummed in the garden.",
      "the miller ground the wheat.",
      "a star fell over the field.",
      "the bridge spans the deep gorge.",
      "smoke curled from the chimney.",
      "the bell rang twice at noon.",
      "a wolf howled on the ridge.",
      "the farmer planted ten rows.",
      "dust settled on the bookshelf.",
      "the storm passed before dark.",
      "a crow perched on the gate.",
      "the well ran dry in august.",
      "candles burned in the chapel.",
      "the map showed an old trail.",
      "a spider spun by the door.",
      "the orchard bloomed in spring.",
      "thunder rolled across the bay.",
      "the miner dug for silver ore.",
      "a ferry crossed at first light.",
      "the garden wall needs repair.",
      "ice formed along the gutter.",
      "the shepherd counted his flock.",
      "a letter arrived from abroad.",
      "the engine stalled on the hill.",
      "moss grew on the north stones.",
      "the tailor cut the blue cloth.",
      "a duck led nine small ducklings.",
      "the cellar smelled of apples.",
      "waves broke against the pier.",
      "the hunter followed the tracks.",
      "a squirrel buried three acorns.",
      "the lighthouse swept the fog.",
      "rainbows arced over the falls.",
      "the scribe copied the ledger.",
      "a cart rolled down the lane.",
      "the forge glowed red all day.",
      "sparrows nested under the eaves.",
      "the judge read the verdict aloud.",
      "a kite climbed into the wind.",
      "the harvest filled six barns.",
      "fog settled over the meadow.",
      "the smith shod the grey mare.",
      "a trout leapt in the shallows.",
      "the library closed at eight.",
      "embers died in the fire pit.",
      "the weaver threaded the loom.",
      "a badger crossed the old road.",
      "the choir sang in the evening.",
      "hail rattled on the tin roof.",
      "the captain charted a course.",
      "a hare bolted from the hedge.",
      "the market opened at seven.",
      "ivy climbed the east tower.",
      "the potter shaped a tall vase.",
      "a swan glided on the pond.",
      "the sexton tolled the great bell.",
      "grapes ripened on the arbor.",
      "the clerk stamped each page.",
      "a mole tunneled under the lawn.",
      "the mill wheel turned slowly.",
      "pears fell into the soft grass.",
      "the guard walked the ramparts.",
      "a heron stood in the reeds.",
      "the teacher chalked the sums.",
      "clouds raced before the gale.",
      "the cooper bound the barrel.",
      "a lamb strayed from the fold.",
      "the inn served stew at dusk.",
      "ravens circled the old keep.",
      "the surveyor staked the line.",
      "a beetle crossed the flagstone.",
      "the organ filled the nave.",
      "dew beaded on the cobwebs.",
      "the porter carried two trunks.",
      "a finch pecked at the seed.",
      "the gardener pruned the roses.",
      "mist rose from the warm earth.",
      "the mason squared the corner.",
      "a pike lurked by the weir.",
      "the curfew bell rang at ten.",
      "acorns dropped on the path.",
      "the fiddler played a slow air.",
      "a vole darted under the leaves.",
      "the brewer tapped a new cask.",
      "lanterns lined the wet street.",
      "the pilot read the river well.",
      "a stoat slipped through the wall.",
      "the granary held the rye.",
      "shadows grew long at sunset.",
      "the cobbler mended the boots.",
      "a gull cried above the quay.",
      "the vintner corked the bottles.",
      "reeds bent along the margin.",
      "the warden locked the gates.",
      "a moth circled the candle.",
      "the plough turned the dark soil.",
      "chimes sounded from the square.",
      "the falconer loosed the hawk.",
      "a pheasant burst from cover.",
      "the notary sealed the deed.",
      "brambles choked the old stile.",
      "the drover watered the herd.",
      "a magpie stole a bright button.",
      "the glazier set the last pane.",
      "wheat swayed in the long field.",
      "the carter greased the axle.",
      "a newt clung to the wet stone.",
      "the abbot blessed the harvest.",
      "cress grew thick by the spring.",
      "the printer set the type.",
      "a buzzard wheeled over the down.",
      "the saddler waxed the reins.",
      "barley stood ready to cut.",
      "the keeper fed the young swans.",
      "a cricket chirped by the hearth.",
      "the sawyer stacked the planks.",
      "plums darkened on the bough.",
      "the verger swept the aisle.",
      "a rat gnawed at the sack.",
      "the chandler dipped the wicks.",
      "clover spread across the ley.",
      "the reeve tallied the rents.",
      "a toad sheltered under the slab.",
      "the wright trued the wheel.",
  };
  return sentences;
}

}  // namespace trojanlab
